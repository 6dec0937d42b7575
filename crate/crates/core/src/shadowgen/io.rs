use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, Kind, KnowledgeGroup, PromptRecord, BG_LEN, ENTITY_POS, PROMPT_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: DatasetSpec,
    pub groups: usize,
    pub records: usize,
}

/// One header line with the spec, then one record per line.
pub fn write_jsonl<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        groups: ds.groups.len(),
        records: ds.records.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Input("dataset file is empty".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("dataset line {}: {e}", i + 2)))?;
        if rec.tokens.len() != PROMPT_LEN {
            return Err(Error::Input(format!(
                "dataset line {}: prompt length {}",
                i + 2,
                rec.tokens.len()
            )));
        }
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(Error::Input(format!(
            "header announces {} records, found {}",
            header.records,
            records.len()
        )));
    }
    let groups = regroup(&records)?;
    if groups.len() != header.groups {
        return Err(Error::Input(format!(
            "header announces {} groups, found {}",
            header.groups,
            groups.len()
        )));
    }
    Ok(Dataset {
        spec: header.spec,
        groups,
        records,
    })
}

fn regroup(records: &[PromptRecord]) -> Result<Vec<KnowledgeGroup>> {
    let mut by_id: BTreeMap<usize, Vec<&PromptRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.group).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (expect, (id, recs)) in by_id.into_iter().enumerate() {
        if id != expect {
            return Err(Error::Input(format!("group ids are not contiguous at {id}")));
        }
        let bad = |why: &str| Error::Input(format!("group {id}: {why}"));
        let mut x_bg = [0; BG_LEN];
        x_bg.copy_from_slice(&recs[0].tokens[..BG_LEN]);
        if recs.iter().any(|r| r.tokens[..BG_LEN] != x_bg) {
            return Err(bad("records disagree on the background"));
        }
        let subs: Vec<_> = recs.iter().filter(|r| r.kind == Kind::Subordinate).collect();
        let doms: Vec<_> = recs.iter().filter(|r| r.kind == Kind::Dominant).collect();
        if subs.len() != 1 || doms.is_empty() {
            return Err(bad("needs one subordinate and at least one dominant record"));
        }
        let y_dom = doms[0].answer;
        if doms.iter().any(|r| r.answer != y_dom) {
            return Err(bad("dominant answers differ"));
        }
        let g = KnowledgeGroup {
            id,
            x_bg,
            x_dom: doms.iter().map(|r| r.tokens[ENTITY_POS]).collect(),
            y_dom,
            x_sub: subs[0].tokens[ENTITY_POS],
            y_sub: subs[0].answer,
        };
        g.check()?;
        out.push(g);
    }
    Ok(out)
}
