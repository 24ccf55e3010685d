//! Text file formats: manifests, vocabularies, posterior dumps, n-best
//! lists and metrics logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use ctca_core::ctc::CtcPosteriors;
use ctca_core::search::Hypothesis;
use ctca_core::subword::SubwordVocab;
use ctca_core::training::MetricsRow;
use ctca_core::Tensor;

// ---- manifest -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Regenerated from the transcript by the synthetic corpus.
    Synth,
    Wav(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    pub transcript: String,
}

/// Tab-separated `id, path-or-synth, transcript` records. `#` lines are
/// comments, except `# synth key=value ...`, which records the generator
/// settings needed to render `synth` entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub synth: Vec<(String, String)>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# synth ") {
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').with_context(|| format!("line {}: bad synth setting {kv:?}", n + 1))?;
                    m.synth.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut f = line.splitn(3, '\t');
            let (Some(id), Some(src), Some(tr)) = (f.next(), f.next(), f.next()) else {
                bail!("line {}: expected 3 tab-separated fields", n + 1);
            };
            ensure!(!id.is_empty(), "line {}: empty utterance id", n + 1);
            let source = if src == "synth" { Source::Synth } else { Source::Wav(base.join(src)) };
            m.entries.push(ManifestEntry { id: id.to_string(), source, transcript: tr.trim().to_string() });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if !self.synth.is_empty() {
            s.push_str("# synth");
            for (k, v) in &self.synth {
                let _ = write!(s, " {k}={v}");
            }
            s.push('\n');
        }
        for e in &self.entries {
            let src = match &e.source {
                Source::Synth => "synth".to_string(),
                Source::Wav(p) => p.display().to_string(),
            };
            let _ = writeln!(s, "{}\t{}\t{}", e.id, src, e.transcript);
        }
        s
    }

    pub fn synth_setting(&self, key: &str) -> Option<&str> {
        self.synth.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

// ---- vocabulary -----------------------------------------------------------

pub const VOCAB_HEADER: &str = "bpe-vocab v1";

/// Header, one `left<TAB>right` merge per line, then `#units` and one unit
/// per line in id order (id 0 is the CTC blank).
pub fn render_vocab(v: &SubwordVocab) -> String {
    let mut s = format!("{VOCAB_HEADER}\n");
    for (l, r) in v.merges() {
        let _ = writeln!(s, "{l}\t{r}");
    }
    s.push_str("#units\n");
    for u in v.units() {
        let _ = writeln!(s, "{u}");
    }
    s
}

pub fn parse_vocab(text: &str) -> anyhow::Result<SubwordVocab> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some(VOCAB_HEADER), "missing {VOCAB_HEADER:?} header");
    let mut merges = Vec::new();
    let mut units = Vec::new();
    let mut in_units = false;
    for (n, line) in lines.enumerate() {
        if !in_units && line == "#units" {
            in_units = true;
        } else if in_units {
            units.push(line.to_string());
        } else {
            let (l, r) = line.split_once('\t').with_context(|| format!("merge line {}: no tab", n + 2))?;
            merges.push((l.to_string(), r.to_string()));
        }
    }
    ensure!(in_units, "missing #units section");
    Ok(SubwordVocab::from_parts(merges, units)?)
}

pub fn load_vocab(path: &Path) -> anyhow::Result<SubwordVocab> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_vocab(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---- CTC posteriors -------------------------------------------------------

/// `ctc-post v1`, then `T' V`, then T' rows of V probabilities.
pub fn render_posteriors(q: &CtcPosteriors) -> String {
    let mut s = format!("ctc-post v1\n{} {}\n", q.frames(), q.units());
    for t in 0..q.frames() {
        let row: Vec<String> = q.frame(t).iter().map(|p| format!("{p:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_posteriors(text: &str) -> anyhow::Result<CtcPosteriors> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("ctc-post v1"), "missing ctc-post v1 header");
    let dims: Vec<usize> = lines
        .next()
        .context("missing dimensions")?
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    ensure!(dims.len() == 2, "dimension line must hold T' and V");
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for line in lines.by_ref().take(dims[0]) {
        let row: Vec<f64> = line.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
        ensure!(row.len() == dims[1], "row has {} values, expected {}", row.len(), dims[1]);
        data.extend(row);
    }
    ensure!(data.len() == dims[0] * dims[1], "expected {} rows", dims[0]);
    Ok(CtcPosteriors::new(Tensor::new(dims, data)?, ctca_core::ctc::BLANK)?)
}

// ---- n-best ---------------------------------------------------------------

pub const NBEST_HEADER: &str = "utterance_id\trank\tscore\tatt\tlm\tctc\ttext";

pub fn nbest_line(id: &str, rank: usize, h: &Hypothesis, text: &str) -> String {
    format!("{id}\t{rank}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{text}", h.score, h.att_logp, h.lm_logp, h.ctc_logp)
}

/// Best (rank 1) text per utterance id from an n-best file.
pub fn parse_nbest_best(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line == NBEST_HEADER || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(7, '\t').collect();
        ensure!(f.len() >= 6, "n-best line {}: too few fields", n + 1);
        if f[1] == "1" {
            out.push((f[0].to_string(), f.get(6).copied().unwrap_or("").to_string()));
        }
    }
    Ok(out)
}

// ---- metrics --------------------------------------------------------------

pub const METRICS_HEADER: &str = "iteration,train_loss,train_acc,val_acc,epsilon";

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn metrics_line(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{:e}",
        r.iteration,
        num(r.train_loss),
        num(r.train_acc),
        num(r.val_acc),
        r.epsilon
    )
}

/// Numeric columns of a CSV with a header; empty cells read as NaN.
pub fn parse_csv(text: &str) -> anyhow::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().context("empty CSV")?.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|e| anyhow::anyhow!("row {}: {c:?}: {e}", n + 2))
                }
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        ensure!(row.len() == header.len(), "row {} has {} cells, header has {}", n + 2, row.len(), header.len());
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let text = "# synth seed=3 snr_db=inf\n# note\nu1\tsynth\tyes no\nu2\ta/b.wav\tup\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].source, Source::Wav(PathBuf::from("/data/a/b.wav")));
        assert_eq!(m.synth_setting("seed"), Some("3"));
        let again = Manifest::parse(&m.render(), Path::new("/data")).unwrap();
        assert_eq!(m, again);
        assert!(Manifest::parse("u1\tsynth\n", Path::new(".")).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let v = SubwordVocab::train(&["low low lower newest"], 4).unwrap();
        assert_eq!(parse_vocab(&render_vocab(&v)).unwrap(), v);
        assert!(parse_vocab("nope\n").is_err());
    }

    #[test]
    fn posterior_round_trip() {
        let q = CtcPosteriors::new(Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap(), 0).unwrap();
        let r = parse_posteriors(&render_posteriors(&q)).unwrap();
        assert_eq!(q.as_tensor(), r.as_tensor());
    }

    #[test]
    fn metrics_csv_reads_back() {
        let row = MetricsRow { iteration: 5, train_loss: 1.5, train_acc: f64::NAN, val_acc: 0.25, epsilon: 1e-8 };
        let text = format!("{METRICS_HEADER}\n{}\n", metrics_line(&row));
        let (h, rows) = parse_csv(&text).unwrap();
        assert_eq!(h.len(), 5);
        assert_eq!(rows[0][0], 5.0);
        assert!(rows[0][2].is_nan());
        assert_eq!(rows[0][4], 1e-8);
    }
}
