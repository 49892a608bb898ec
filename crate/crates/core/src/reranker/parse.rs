use std::collections::HashMap;

use super::{RerankRequest, RerankResponse};
use crate::retrieval::RankedList;

pub(crate) fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn closing_quote(c: char) -> Option<char> {
    match c {
        '\'' => Some('\''),
        '"' => Some('"'),
        '\u{2018}' => Some('\u{2019}'),
        '\u{201C}' => Some('\u{201D}'),
        _ => None,
    }
}

/// Entries of the first bracketed list in `raw`, and whether the list was
/// closed. `None` when there is no opening bracket at all.
fn first_list(raw: &str) -> Option<(Vec<String>, bool)> {
    let start = raw.find('[')?;
    let mut chars = raw[start + 1..].chars().peekable();
    let mut entries = Vec::new();
    while let Some(c) = chars.next() {
        if c == ']' {
            return Some((entries, true));
        }
        if c == ',' || c.is_whitespace() {
            continue;
        }
        if let Some(close) = closing_quote(c) {
            let mut s = String::new();
            let mut terminated = false;
            while let Some(c) = chars.next() {
                if c == '\\' {
                    if let Some(esc) = chars.next() {
                        s.push(esc);
                    }
                } else if c == close {
                    terminated = true;
                    break;
                } else {
                    s.push(c);
                }
            }
            entries.push(s);
            if !terminated {
                return Some((entries, false));
            }
        } else {
            let mut s = String::from(c);
            while let Some(&c) = chars.peek() {
                if c == ',' || c == ']' {
                    break;
                }
                s.push(c);
                chars.next();
            }
            entries.push(s.trim().to_string());
        }
    }
    Some((entries, false))
}

/// Extracts a ranking from a model response. Never fails: unrecognized
/// names are dropped, recognized ones keep response order, and any missing
/// candidates are appended in request order. `repaired` is set whenever one
/// of those repairs applied.
pub fn parse_ranking(raw: &str, request: &RerankRequest) -> RerankResponse {
    let by_name: HashMap<String, usize> = request
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (normalize_name(&c.name), i))
        .collect();
    let mut notes = Vec::new();
    let mut used = vec![false; request.candidates.len()];
    let mut order = Vec::with_capacity(request.candidates.len());

    match first_list(raw) {
        None => notes.push("no-list".to_string()),
        Some((entries, closed)) => {
            if !closed {
                notes.push("unterminated-list".to_string());
            }
            for entry in entries {
                match by_name.get(&normalize_name(&entry)) {
                    Some(&i) if !used[i] => {
                        used[i] = true;
                        order.push(i);
                    }
                    Some(_) => notes.push(format!("duplicate:{entry}")),
                    None => notes.push(format!("hallucinated:{entry}")),
                }
            }
        }
    }
    for (i, c) in request.candidates.iter().enumerate() {
        if !used[i] {
            order.push(i);
            if notes.first().map(String::as_str) != Some("no-list") {
                notes.push(format!("missing:{}", c.name));
            }
        }
    }
    let ranking = RankedList::from_order(order.into_iter().map(|i| request.candidates[i].source.clone()).collect())
        .expect("indices are distinct");
    RerankResponse {
        ranking,
        raw: raw.to_string(),
        repaired: !notes.is_empty(),
        repair_notes: notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceId;
    use crate::reranker::tests::request;

    fn ids(names: &[&str]) -> Vec<SourceId> {
        names.iter().map(|n| SourceId::new(*n).unwrap()).collect()
    }

    const TEN: [&str; 10] = ["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"];

    #[test]
    fn clean_permutation() {
        let req = request(&TEN);
        let r = parse_ranking("['J', 'I', 'H', 'G', 'F', 'E', 'D', 'C', 'B', 'A']", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["J", "I", "H", "G", "F", "E", "D", "C", "B", "A"]));
        assert!(!r.repaired);
        assert!(r.repair_notes.is_empty());
    }

    #[test]
    fn repair_missing_and_hallucinated() {
        let req = request(&TEN);
        let r = parse_ranking(
            "Sure! [\"H\", 'G', 'Nobody', 'F', 'E', 'D', 'C', 'B', 'A'] hope it helps",
            &req,
        );
        // I and J missing, appended in request order
        assert_eq!(r.ranking.to_sources(), ids(&["H", "G", "F", "E", "D", "C", "B", "A", "I", "J"]));
        assert!(r.repaired);
        assert!(r.repair_notes.contains(&"hallucinated:Nobody".to_string()));
        assert!(r.repair_notes.contains(&"missing:I".to_string()));
    }

    #[test]
    fn no_list_falls_back_to_request_order() {
        let req = request(&["C", "A", "B"]);
        let r = parse_ranking("I cannot help", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["C", "A", "B"]));
        assert!(r.repaired);
        assert_eq!(r.repair_notes, ["no-list"]);
    }

    #[test]
    fn case_whitespace_bare_and_escapes() {
        let req = request(&["Dr. Ann  Lee", "O'Brien", "WHO"]);
        let r = parse_ranking("[who, 'o\\'brien', \"  DR. ANN LEE \"]", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["WHO", "O'Brien", "Dr. Ann  Lee"]));
        assert!(!r.repaired);
    }

    #[test]
    fn duplicates_and_unterminated() {
        let req = request(&["A", "B", "C"]);
        let r = parse_ranking("['B', 'B', 'A'", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["B", "A", "C"]));
        assert!(r.repair_notes.contains(&"unterminated-list".to_string()));
        assert!(r.repair_notes.contains(&"duplicate:B".to_string()));
        let r = parse_ranking("['B', 'unterminated", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["B", "A", "C"]));
    }

    #[test]
    fn only_the_first_list_counts() {
        let req = request(&["A", "B"]);
        let r = parse_ranking("[] then ['B', 'A']", &req);
        assert_eq!(r.ranking.to_sources(), ids(&["A", "B"]));
        assert!(r.repaired);
    }
}
