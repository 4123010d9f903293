use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Ordered class names with an optional superordinate focal class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
    focal_index: Option<usize>,
}

impl ClassTable {
    pub fn new<S: AsRef<str>>(names: &[S], focal: Option<&str>) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().trim().to_string()).collect();
        if names.is_empty() {
            return Err(Error::Config("class table is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name `{n}`")));
            }
        }
        let focal_index = match focal {
            None => None,
            Some(f) => Some(
                names
                    .iter()
                    .position(|n| n == f)
                    .ok_or_else(|| Error::Config(format!("focal class `{f}` is not listed")))?,
            ),
        };
        Ok(ClassTable { names, focal_index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn focal_index(&self) -> Option<usize> {
        self.focal_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    /// Classes that enter micro and macro averages.
    pub fn scored_classes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| Some(c) != self.focal_index).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        if let Some(f) = self.focal_index {
            s.push_str(&format!("#focal={}\n", self.names[f]));
        }
        s
    }
}

/// One name per line; `#focal=<name>` marks the focal class.
pub fn load_class_table(path: &Path) -> Result<ClassTable> {
    let text = std::fs::read_to_string(path)?;
    let mut names = Vec::new();
    let mut focal = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#focal=") {
            focal = Some(rest.trim().to_string());
        } else if !line.starts_with('#') {
            names.push(line.to_string());
        }
    }
    ClassTable::new(&names, focal.as_deref())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelEvent {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub focal: bool,
}

impl LabelEvent {
    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Events per clip id.
pub type Manifest = BTreeMap<String, Vec<LabelEvent>>;

#[derive(Debug, Deserialize)]
struct Row {
    clip_id: Option<String>,
    class: String,
    onset_s: f64,
    offset_s: f64,
    focal: u8,
}

fn parse_rows(path: &Path, table: &ClassTable, need_clip: bool) -> Result<Vec<(String, LabelEvent)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if need_clip && !headers.iter().any(|h| h == "clip_id") {
        return Err(Error::Label {
            row: 1,
            reason: "manifest header lacks `clip_id`".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Line numbers count the header as line 1.
        let row = i + 2;
        let rec = rec?;
        let r: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Label {
            row,
            reason: e.to_string(),
        })?;
        let class_id = table.index_of(&r.class).ok_or_else(|| Error::Label {
            row,
            reason: format!("unknown class `{}`", r.class),
        })?;
        if !r.onset_s.is_finite() || !r.offset_s.is_finite() || r.onset_s < 0.0 {
            return Err(Error::Label {
                row,
                reason: format!("invalid times {} .. {}", r.onset_s, r.offset_s),
            });
        }
        if r.offset_s <= r.onset_s {
            return Err(Error::Label {
                row,
                reason: format!("offset {} is not after onset {}", r.offset_s, r.onset_s),
            });
        }
        let focal = match r.focal {
            0 => false,
            1 => true,
            v => {
                return Err(Error::Label {
                    row,
                    reason: format!("focal flag {v} is not 0 or 1"),
                })
            }
        };
        out.push((
            r.clip_id.unwrap_or_default(),
            LabelEvent {
                class_id,
                onset_s: r.onset_s,
                offset_s: r.offset_s,
                focal,
            },
        ));
    }
    Ok(out)
}

fn sort_events(events: &mut [LabelEvent]) {
    events.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.offset_s.total_cmp(&b.offset_s))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Reads a label CSV for a single clip. The `clip_id` column is optional.
pub fn load_labels(path: &Path, table: &ClassTable) -> Result<Vec<LabelEvent>> {
    let mut events: Vec<LabelEvent> = parse_rows(path, table, false)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    sort_events(&mut events);
    Ok(events)
}

/// Reads a global manifest keyed by `clip_id`.
pub fn load_manifest(path: &Path, table: &ClassTable) -> Result<Manifest> {
    let mut m = Manifest::new();
    for (clip, ev) in parse_rows(path, table, true)? {
        m.entry(clip).or_default().push(ev);
    }
    for events in m.values_mut() {
        sort_events(events);
    }
    Ok(m)
}

/// Shortest round-tripping decimal, padded to at least three fractional digits.
fn format_seconds(v: f64) -> String {
    let mut s = format!("{v}");
    match s.find('.') {
        None => s.push_str(".000"),
        Some(dot) => {
            let frac = s.len() - dot - 1;
            for _ in frac..3 {
                s.push('0');
            }
        }
    }
    s
}

pub fn save_manifest(path: &Path, manifest: &Manifest, table: &ClassTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["clip_id", "class", "onset_s", "offset_s", "focal"])?;
    for (clip, events) in manifest {
        for e in events {
            w.write_record([
                clip.as_str(),
                table.name(e.class_id),
                &format_seconds(e.onset_s),
                &format_seconds(e.offset_s),
                if e.focal { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> ClassTable {
        ClassTable::new(&["cc", "sn", "mo", "focal"], Some("focal")).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn header_only_gives_no_events() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "l.csv", "class,onset_s,offset_s,focal\n");
        assert!(load_labels(&p, &table()).unwrap().is_empty());
    }

    #[test]
    fn single_row_parses() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "l.csv", "class,onset_s,offset_s,focal\ncc,1.250,1.365,1\n");
        let ev = load_labels(&p, &table()).unwrap();
        assert_eq!(
            ev,
            vec![LabelEvent {
                class_id: 0,
                onset_s: 1.25,
                offset_s: 1.365,
                focal: true
            }]
        );
    }

    #[test]
    fn overlapping_events_are_kept_and_sorted() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            &d,
            "l.csv",
            "clip_id,class,onset_s,offset_s,focal\na,sn,2.000,2.500,0\na,cc,1.900,2.200,0\n",
        );
        let ev = load_labels(&p, &table()).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].class_id, 0);
        assert_eq!(ev[1].class_id, 1);
    }

    #[test]
    fn unknown_class_reports_its_row() {
        let d = tempfile::tempdir().unwrap();
        let p = write(
            &d,
            "l.csv",
            "class,onset_s,offset_s,focal\ncc,0.100,0.200,0\nxx,0.300,0.400,0\n",
        );
        match load_labels(&p, &table()) {
            Err(Error::Label { row, reason }) => {
                assert_eq!(row, 3);
                assert!(reason.contains("xx"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reversed_interval_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "l.csv", "class,onset_s,offset_s,focal\ncc,0.300,0.300,0\n");
        assert!(matches!(load_labels(&p, &table()), Err(Error::Label { row: 2, .. })));
    }

    #[test]
    fn class_table_file_with_focal_line() {
        let d = tempfile::tempdir().unwrap();
        let p = write(&d, "c.txt", "cc\nsn\n\nfocal\n#focal=focal\n");
        let t = load_class_table(&p).unwrap();
        assert_eq!(t, ClassTable::new(&["cc", "sn", "focal"], Some("focal")).unwrap());
        assert_eq!(t.focal_index(), Some(2));
        assert_eq!(t.scored_classes(), vec![0, 1]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        assert!(ClassTable::new(&["a", "a"], None).is_err());
        assert!(ClassTable::new(&["a"], Some("b")).is_err());
    }

    #[test]
    fn seconds_format_has_three_decimals() {
        assert_eq!(format_seconds(1.0), "1.000");
        assert_eq!(format_seconds(1.25), "1.250");
        assert_eq!(format_seconds(0.123456), "0.123456");
    }

    proptest! {
        #[test]
        fn manifest_round_trip(
            raw in proptest::collection::vec(
                (0usize..3, 0usize..4, 0.0f64..9.0, 0.001f64..1.0, any::<bool>()),
                0..30,
            )
        ) {
            let t = table();
            let mut m = Manifest::new();
            for (clip, class_id, onset, len, focal) in raw {
                m.entry(format!("clip{clip}")).or_default().push(LabelEvent {
                    class_id, onset_s: onset, offset_s: onset + len, focal,
                });
            }
            for ev in m.values_mut() {
                sort_events(ev);
            }
            let d = tempfile::tempdir().unwrap();
            let p = d.path().join("m.csv");
            save_manifest(&p, &m, &t).unwrap();
            let back = load_manifest(&p, &t).unwrap();
            prop_assert_eq!(&back, &m);
            let p2 = d.path().join("m2.csv");
            save_manifest(&p2, &back, &t).unwrap();
            prop_assert_eq!(load_manifest(&p2, &t).unwrap(), m);
        }
    }
}
