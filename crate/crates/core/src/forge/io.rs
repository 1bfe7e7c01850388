//! Bundle files: JSON Lines with one header record followed by one record
//! per document.
//!
//! The header record holds `header` (source, variant, seed, spec hash,
//! toolkit version), the entity/alias/tag/subset/definition tables and
//! `document_count`. Every later line is a [`Document`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Alias, BundleHeader, DatasetBundle, DefineTag, Definition, Document, EntityRecord, SubsetAssignment};
use crate::error::{CoreError, Result};

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    header: BundleHeader,
    entities: Vec<EntityRecord>,
    aliases: Vec<Alias>,
    tags: Vec<DefineTag>,
    subsets: Vec<SubsetAssignment>,
    definitions: Vec<Definition>,
    document_count: usize,
}

pub fn serialize_bundle(bundle: &DatasetBundle) -> String {
    let head = HeaderRecord {
        header: bundle.header.clone(),
        entities: bundle.entities.clone(),
        aliases: bundle.aliases.clone(),
        tags: bundle.tags.clone(),
        subsets: bundle.subsets.clone(),
        definitions: bundle.definitions.clone(),
        document_count: bundle.documents.len(),
    };
    let mut out = serde_json::to_string(&head).expect("bundle header serializes");
    out.push('\n');
    for d in &bundle.documents {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

/// Parse bundle text; `origin` names the source in errors.
pub fn read_bundle(text: &str, origin: &str) -> Result<DatasetBundle> {
    let err = |line: usize, message: String| CoreError::ParseAt { path: origin.to_string(), line, message };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| err(1, "empty bundle file".into()))?;
    let head: HeaderRecord = serde_json::from_str(first).map_err(|e| err(1, e.to_string()))?;
    let mut documents = Vec::with_capacity(head.document_count);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        documents.push(serde_json::from_str::<Document>(line).map_err(|e| err(i + 2, e.to_string()))?);
    }
    if documents.len() != head.document_count {
        return Err(err(
            documents.len() + 2,
            format!("header announces {} documents, file has {}", head.document_count, documents.len()),
        ));
    }
    Ok(DatasetBundle {
        header: head.header,
        entities: head.entities,
        aliases: head.aliases,
        tags: head.tags,
        subsets: head.subsets,
        definitions: head.definitions,
        documents,
    })
}

pub fn write_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, serialize_bundle(bundle)).map_err(|e| CoreError::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    read_bundle(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{gen_set_inclusion, ForgeConfig, SetInclusionSpec};

    fn small() -> DatasetBundle {
        let spec = SetInclusionSpec { variables: 40, ..Default::default() };
        gen_set_inclusion(&ForgeConfig::set_inclusion(spec), 9).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let b = small();
        let text = serialize_bundle(&b);
        assert_eq!(read_bundle(&text, "mem").unwrap(), b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.jsonl");
        write_bundle(&b, &p).unwrap();
        assert_eq!(load_bundle(&p).unwrap(), b);
        assert_eq!(serialize_bundle(&small()), text);
    }

    #[test]
    fn truncated_and_malformed_files_fail_with_line_numbers() {
        let text = serialize_bundle(&small());
        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() - 3].join("\n");
        match read_bundle(&truncated, "t") {
            Err(CoreError::ParseAt { message, .. }) => assert!(message.contains("announces")),
            other => panic!("expected parse error, got {other:?}"),
        }
        let cut = &text[..text.len() - 20];
        assert!(matches!(read_bundle(cut, "t"), Err(CoreError::ParseAt { .. })));
        let mut bad = lines.clone();
        bad[5] = "{not json";
        match read_bundle(&bad.join("\n"), "t") {
            Err(CoreError::ParseAt { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
