//! Ingestion of the raw natural-language fact tables.
//!
//! CVDB input is a tab-separated file with a header row naming the columns
//! `name`, `gender`, `birth`, `death`, `un_region`, `level3_main_occ`,
//! `string_citizenship_raw_d` and `wiki_readers_2015_2018`. T-REx input is
//! a tab-separated file with columns `subject`, `predicate`, `object`.
//! Fields are read verbatim (no quote processing).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use super::EntityRecord;
use crate::error::{CoreError, Result};

/// Replace a calendar year by a coarser period.
///
/// Years before 1900 become centuries (`1812` -> `19 century`, `-122` ->
/// `2 century BC`), 1900-1999 become decades (`1923` -> `1920s`), and later
/// years are kept.
pub fn anonymize_year(year: i32) -> Result<String> {
    match year {
        0 => Err(CoreError::Domain("year 0 does not exist".into())),
        y if y < 0 => {
            let c = (-(y as i64) - 1) / 100 + 1;
            Ok(format!("{c} century BC"))
        }
        y if y < 1900 => Ok(format!("{} century", (y - 1) / 100 + 1)),
        y if y < 2000 => Ok(format!("{}s", y / 10 * 10)),
        y => Ok(y.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CvdbRow {
    pub name: String,
    pub gender: String,
    pub birth: String,
    pub death: String,
    #[serde(rename = "un_region")]
    pub region: String,
    #[serde(rename = "level3_main_occ")]
    pub occupation: String,
    #[serde(rename = "string_citizenship_raw_d")]
    pub nationality: String,
    #[serde(rename = "wiki_readers_2015_2018")]
    pub popularity: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TrexTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

fn read_tsv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_path(path)
        .map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize().enumerate() {
        let row: T = rec.map_err(|e| CoreError::ParseAt {
            path: path.display().to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_cvdb_tsv(path: &Path) -> Result<Vec<CvdbRow>> {
    read_tsv(path)
}

pub fn read_trex_tsv(path: &Path) -> Result<Vec<TrexTriplet>> {
    read_tsv(path)
}

pub(crate) fn is_clean_name(name: &str) -> bool {
    !name.trim().is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == ' ')
}

/// CVDB question kinds in canonical order.
pub const CVDB_KINDS: [&str; 6] = ["gender", "birth", "death", "region", "occupation", "nationality"];

fn parse_year(s: &str) -> Option<i32> {
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let end = digits.find(|c: char| !c.is_ascii_digit()).unwrap_or(digits.len());
    let y: i32 = digits[..end].parse().ok()?;
    Some(if neg { -y } else { y })
}

/// Select the `count` most popular clean-named people, half of each gender.
pub fn ingest_cvdb(rows: &[CvdbRow], count: usize, questions_per_entity: usize) -> Result<Vec<EntityRecord>> {
    if !(1..=CVDB_KINDS.len()).contains(&questions_per_entity) {
        return Err(CoreError::Generation(format!(
            "questions_per_entity must be in 1..=6, got {questions_per_entity}"
        )));
    }
    let mut by_gender: BTreeMap<&str, Vec<(f64, &str, BTreeMap<String, String>)>> = BTreeMap::new();
    for row in rows {
        if !is_clean_name(&row.name) {
            continue;
        }
        let gender = match row.gender.trim().to_ascii_lowercase().as_str() {
            "male" => "male",
            "female" => "female",
            _ => continue,
        };
        let birth = parse_year(&row.birth).and_then(|y| anonymize_year(y).ok());
        let death = parse_year(&row.death).and_then(|y| anonymize_year(y).ok());
        let (Some(birth), Some(death)) = (birth, death) else { continue };
        let fields = [row.region.trim(), row.occupation.trim(), row.nationality.trim()];
        if fields.iter().any(|f| f.is_empty()) {
            continue;
        }
        let answers = [gender.to_string(), birth, death, fields[0].into(), fields[1].into(), fields[2].into()];
        let attributes: BTreeMap<String, String> = CVDB_KINDS
            .iter()
            .zip(answers)
            .take(questions_per_entity)
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        by_gender.entry(gender).or_default().push((row.popularity, row.name.trim(), attributes));
    }
    let per_gender = count / 2;
    let mut chosen = Vec::with_capacity(count);
    for gender in ["male", "female"] {
        let mut pool = by_gender.remove(gender).unwrap_or_default();
        if pool.len() < per_gender {
            return Err(CoreError::Generation(format!(
                "need {per_gender} valid {gender} rows, found {} (short by {})",
                pool.len(),
                per_gender - pool.len()
            )));
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        pool.truncate(per_gender);
        chosen.extend(pool);
    }
    chosen.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(rank, (_, name, attributes))| EntityRecord {
            id: rank as u32,
            name: name.to_string(),
            attributes,
            popularity_rank: Some(rank as u32 + 1),
        })
        .collect())
}

/// Creative-work predicates and their question templates (`[X]` is the
/// subject). Two language predicates share one question.
pub const TREX_QUESTIONS: [(&str, &str); 26] = [
    ("P180", "What does [X] depict?"),
    ("P195", "Which collection is [X] part of?"),
    ("P135", "Which movement is [X] associated with?"),
    ("P123", "Who is the publisher of [X]?"),
    ("P750", "What is the distributor of [X]?"),
    ("P275", "What is the license of [X]?"),
    ("P127", "Who owns [X]?"),
    ("P178", "Who developed [X]?"),
    ("P407", "In which language was [X] published?"),
    ("P364", "In which language was [X] published?"),
    ("P577", "When was [X] published or released?"),
    ("P179", "Which series is [X] part of?"),
    ("P50", "First name of the author of [X]?"),
    ("P57", "First name of the director of [X]?"),
    ("P58", "First name of the screenwriter of [X]?"),
    ("P344", "First name of the cinematographer of [X]?"),
    ("P161", "First name of a cast member of [X]?"),
    ("P162", "First name of the producer of [X]?"),
    ("P1040", "First name of the editor of [X]?"),
    ("P98", "First name of the editor of [X]?"),
    ("P88", "First name of the commissioner of [X]?"),
    ("P86", "First name of the composer for [X]?"),
    ("P136", "What is the genre of [X]?"),
    ("P921", "What is the main subject of [X]?"),
    ("P840", "Where is [X] set?"),
    ("P915", "Where was [X] filmed?"),
];

pub(crate) const TREX_QUESTIONS_PER_SUBJECT: usize = 4;

/// Question template for a T-REx attribute key.
pub fn trex_template(key: &str) -> Option<&'static str> {
    TREX_QUESTIONS.iter().find(|(p, _)| *p == key).map(|(_, q)| *q)
}

/// Group triplets into subjects with exactly four questions each and keep
/// the first `target` subjects in name order.
pub fn ingest_trex(triplets: &[TrexTriplet], target: usize) -> Result<Vec<EntityRecord>> {
    // subject -> question text -> (first predicate, objects)
    let mut grouped: BTreeMap<&str, BTreeMap<&str, (&str, Vec<String>)>> = BTreeMap::new();
    for t in triplets {
        let Some(&(pred, question)) = TREX_QUESTIONS.iter().find(|(p, _)| *p == t.predicate.trim()) else {
            continue;
        };
        let subject = t.subject.trim();
        if !is_clean_name(subject) {
            continue;
        }
        let object = t.object.trim();
        let answer = if question.starts_with("First name") {
            object.split_whitespace().next().unwrap_or("").to_string()
        } else if pred == "P577" {
            match parse_year(object).map(anonymize_year) {
                Some(Ok(a)) => a,
                _ => continue,
            }
        } else {
            object.to_string()
        };
        if answer.is_empty() {
            continue;
        }
        let entry = grouped.entry(subject).or_default().entry(question).or_insert((pred, Vec::new()));
        if !entry.1.contains(&answer) {
            entry.1.push(answer);
        }
    }
    let order = |q: &str| TREX_QUESTIONS.iter().position(|(_, t)| *t == q).unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for (subject, questions) in grouped {
        if questions.len() < TREX_QUESTIONS_PER_SUBJECT {
            continue;
        }
        let mut qs: Vec<_> = questions.into_iter().collect();
        qs.sort_by_key(|(q, _)| order(q));
        let attributes: BTreeMap<String, String> = qs
            .into_iter()
            .take(TREX_QUESTIONS_PER_SUBJECT)
            .map(|(_, (pred, objs))| (pred.to_string(), objs.join(";")))
            .collect();
        out.push((subject, attributes));
    }
    if out.len() < target {
        return Err(CoreError::Generation(format!(
            "only {} subjects have {TREX_QUESTIONS_PER_SUBJECT} answerable questions, {target} requested",
            out.len()
        )));
    }
    Ok(out
        .into_iter()
        .take(target)
        .enumerate()
        .map(|(i, (name, attributes))| EntityRecord { id: i as u32, name: name.to_string(), attributes, popularity_rank: None })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_examples() {
        assert_eq!(anonymize_year(1812).unwrap(), "19 century");
        assert_eq!(anonymize_year(-122).unwrap(), "2 century BC");
        assert_eq!(anonymize_year(1923).unwrap(), "1920s");
        assert_eq!(anonymize_year(2005).unwrap(), "2005");
        assert_eq!(anonymize_year(1900).unwrap(), "1900s");
        assert_eq!(anonymize_year(1899).unwrap(), "19 century");
        assert_eq!(anonymize_year(1800).unwrap(), "18 century");
        assert_eq!(anonymize_year(-1).unwrap(), "1 century BC");
        assert!(matches!(anonymize_year(0), Err(CoreError::Domain(_))));
    }

    fn row(name: &str, gender: &str, pop: f64) -> CvdbRow {
        CvdbRow {
            name: name.into(),
            gender: gender.into(),
            birth: "1812".into(),
            death: "1923".into(),
            region: "Europe".into(),
            occupation: "actor".into(),
            nationality: "France".into(),
            popularity: pop,
        }
    }

    #[test]
    fn cvdb_balances_gender_and_filters_names() {
        let rows = vec![
            row("Nat \"King\" Cole", "male", 1e9),
            row("Ada Lovelace", "female", 1.0),
            row("Alan Turing", "male", 2.0),
            row("Grace Hopper", "female", 5.0),
            row("John Smith", "male", 0.5),
        ];
        let e = ingest_cvdb(&rows, 2, 6).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].name, "Grace Hopper");
        assert_eq!(e[1].name, "Alan Turing");
        assert_eq!(e[0].attributes.len(), 6);
        assert_eq!(e[0].attributes["birth"], "19 century");
        assert_eq!(e[0].attributes["death"], "1920s");
        let two = ingest_cvdb(&[row("A", "male", 0.0), row("B", "female", 9.0)], 2, 6).unwrap();
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn cvdb_reports_deficit() {
        let err = ingest_cvdb(&[row("A", "male", 0.0)], 4, 6).unwrap_err();
        assert!(err.to_string().contains("2 valid male rows"), "{err}");
        assert!(err.to_string().contains("short by 1"), "{err}");
    }

    fn t(s: &str, p: &str, o: &str) -> TrexTriplet {
        TrexTriplet { subject: s.into(), predicate: p.into(), object: o.into() }
    }

    #[test]
    fn trex_grouping_rules() {
        let mut triplets = vec![
            t("Film One", "P161", "Tom Hanks"),
            t("Film One", "P161", "Anna Karina"),
            t("Film One", "P577", "1923-05-01"),
            t("Film One", "P136", "drama"),
            t("Film One", "P57", "Jean Renoir"),
            t("Film One", "P840", "Paris"),
            t("Film One", "P915", "Lyon"),
            t("Short", "P136", "comedy"),
        ];
        triplets.push(t("Film One", "P9999", "ignored"));
        let e = ingest_trex(&triplets, 1).unwrap();
        assert_eq!(e.len(), 1);
        let a = &e[0].attributes;
        assert_eq!(a.len(), 4, "six answerable questions, four kept");
        assert_eq!(a["P577"], "1920s");
        assert_eq!(a["P57"], "Jean");
        assert_eq!(a["P161"], "Tom;Anna");
        assert_eq!(trex_template("P577"), Some("When was [X] published or released?"));
        let err = ingest_trex(&triplets, 2).unwrap_err();
        assert!(err.to_string().contains("only 1"), "{err}");
    }
}
