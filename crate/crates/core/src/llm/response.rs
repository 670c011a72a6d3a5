use serde_json::{Map, Value};

use super::PromptMode;

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedResponse {
    pub topic_analysis: String,
    pub reflection: Option<String>,
    pub title: String,
    pub abstract_text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmResponse {
    pub raw: String,
    pub parsed: ParsedResponse,
}

/// Why a reply was rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplyFault {
    /// No JSON object could be found in the reply.
    Malformed,
    /// An object was found but its keys differ from the required set.
    Keys(String),
}

/// First complete JSON object in `raw`, skipping fences and any prose
/// before it.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

fn string_field(map: &Map<String, Value>, key: &str) -> Result<String, ReplyFault> {
    match map.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ReplyFault::Keys(format!("\"{key}\" is not a string"))),
        None => Err(ReplyFault::Keys(format!("missing \"{key}\""))),
    }
}

fn exact_keys(map: &Map<String, Value>, expected: &[&str], what: &str) -> Result<(), ReplyFault> {
    for k in expected {
        if !map.contains_key(*k) {
            return Err(ReplyFault::Keys(format!("{what} is missing \"{k}\"")));
        }
    }
    if let Some(extra) = map.keys().find(|k| !expected.contains(&k.as_str())) {
        return Err(ReplyFault::Keys(format!("{what} has unexpected key \"{extra}\"")));
    }
    Ok(())
}

/// Validates a reply against the key set for `mode`. Matching is exact and
/// case-sensitive; extra keys are rejected.
pub fn parse_reply(raw: &str, mode: PromptMode) -> Result<ParsedResponse, ReplyFault> {
    let map = extract_json_object(raw).ok_or(ReplyFault::Malformed)?;
    let expected: &[&str] = match mode {
        PromptMode::Generate => &["Topic Analysis", "Missing Neighbor"],
        PromptMode::Reflect => &["Topic Analysis", "reflection", "Missing Neighbor"],
    };
    exact_keys(&map, expected, "reply")?;
    let neighbor = match map.get("Missing Neighbor") {
        Some(Value::Object(n)) => n,
        _ => return Err(ReplyFault::Keys("\"Missing Neighbor\" is not an object".into())),
    };
    exact_keys(neighbor, &["title", "abstract"], "\"Missing Neighbor\"")?;
    let title = string_field(neighbor, "title")?;
    let abstract_text = string_field(neighbor, "abstract")?;
    if title.trim().is_empty() || abstract_text.trim().is_empty() {
        return Err(ReplyFault::Keys("empty title or abstract".into()));
    }
    Ok(ParsedResponse {
        topic_analysis: string_field(&map, "Topic Analysis")?,
        reflection: match mode {
            PromptMode::Generate => None,
            PromptMode::Reflect => Some(string_field(&map, "reflection")?),
        },
        title,
        abstract_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const OK: &str = r#"{"Topic Analysis":"a","Missing Neighbor":{"title":"t","abstract":"b"}}"#;

    #[test]
    fn plain_object() {
        let p = parse_reply(OK, PromptMode::Generate).unwrap();
        assert_eq!((p.topic_analysis.as_str(), p.title.as_str(), p.abstract_text.as_str()), ("a", "t", "b"));
        assert_eq!(p.reflection, None);
    }

    #[test]
    fn wrong_case_key_is_rejected() {
        let raw = r#"{"Topic Analysis":"a","missing_neighbor":{"title":"t","abstract":"b"}}"#;
        assert!(matches!(parse_reply(raw, PromptMode::Generate), Err(ReplyFault::Keys(_))));
        let raw = r#"{"topic analysis":"a","Missing Neighbor":{"title":"t","abstract":"b"}}"#;
        assert!(matches!(parse_reply(raw, PromptMode::Generate), Err(ReplyFault::Keys(_))));
        let raw = r#"{"Topic Analysis":"a","Missing Neighbor":{"Title":"t","abstract":"b"}}"#;
        assert!(matches!(parse_reply(raw, PromptMode::Generate), Err(ReplyFault::Keys(_))));
    }

    #[test]
    fn reflect_mode_needs_three_keys() {
        assert!(matches!(parse_reply(OK, PromptMode::Reflect), Err(ReplyFault::Keys(_))));
        let raw = r#"{"Topic Analysis":"a","reflection":"r","Missing Neighbor":{"title":"t","abstract":"b"}}"#;
        assert_eq!(parse_reply(raw, PromptMode::Reflect).unwrap().reflection.as_deref(), Some("r"));
        // and the generate schema rejects the extra key
        assert!(parse_reply(raw, PromptMode::Generate).is_err());
    }

    #[test]
    fn fence_corpus() {
        let corpus = [
            format!("```json\n{OK}\n```"),
            format!("```\n{OK}\n```"),
            format!("Here is the answer:\n```json\n{OK}\n```\nHope this helps."),
            format!("Sure! {OK}"),
            format!("```JSON\n{OK}```"),
            format!("\n\n   {OK}   \n"),
            format!("Note {{not json}} then ```json\n{OK}\n```"),
            "```json\n{\n  \"Topic Analysis\": \"a\",\n  \"Missing Neighbor\": {\n    \"title\": \"t\",\n    \"abstract\": \"b\"\n  }\n}\n```".to_string(),
            format!("{OK}\n{{\"Topic Analysis\":\"second\"}}"),
            format!("~~~json\n{OK}\n~~~"),
        ];
        assert_eq!(corpus.len(), 10);
        for reply in &corpus {
            let p = parse_reply(reply, PromptMode::Generate).unwrap_or_else(|e| panic!("{reply:?}: {e:?}"));
            assert_eq!(p.title, "t");
            assert_eq!(p.topic_analysis, "a");
        }
    }

    #[test]
    fn malformed_replies() {
        for raw in ["", "no json here", "{\"Topic Analysis\": \"a\"", "[1, 2, 3]"] {
            assert_eq!(parse_reply(raw, PromptMode::Generate), Err(ReplyFault::Malformed), "{raw:?}");
        }
    }

    #[test]
    fn empty_generated_text_is_rejected() {
        let raw = r#"{"Topic Analysis":"a","Missing Neighbor":{"title":"","abstract":"b"}}"#;
        assert!(matches!(parse_reply(raw, PromptMode::Generate), Err(ReplyFault::Keys(_))));
    }
}
