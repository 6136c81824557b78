//! Analytic prefill FLOPs of a decoder-only transformer, and the cost of the
//! slot-attention pruner in the same units. All counting is exact integer
//! arithmetic; floats appear only in the reported totals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OcvtpError, Result};

/// Transformer dimensions that drive prefill cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: u64,
    pub hidden: u64,
    pub ffn: u64,
    /// FLOPs per multiply-accumulate (1 or 2).
    #[serde(default = "default_mac")]
    pub mac_factor: u64,
}

fn default_mac() -> u64 {
    2
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, layers: u64, hidden: u64, ffn: u64, mac_factor: u64) -> Result<Self> {
        let arch = ArchSpec {
            name: name.into(),
            layers,
            hidden,
            ffn,
            mac_factor,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("layers", self.layers), ("hidden", self.hidden), ("ffn", self.ffn)] {
            if v == 0 {
                return Err(OcvtpError::config(field, "must be positive"));
            }
        }
        if !(1..=2).contains(&self.mac_factor) {
            return Err(OcvtpError::config("mac_factor", "must be 1 or 2"));
        }
        Ok(())
    }

    /// Built-in language backbones (both 7B variants share the same dims).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llava-1.5" | "llava-next" => ArchSpec::new(name, 32, 4096, 11008, 2),
            _ => Err(OcvtpError::config(
                "arch",
                format!("unknown architecture {name:?} (known: {})", PRESETS.join(", ")),
            )),
        }
    }
}

pub const PRESETS: &[&str] = &["llava-1.5", "llava-next"];

/// Reads `{ "<name>": {layers, hidden, ffn, mac_factor?}, ... }`.
pub fn load_arch_file(path: &Path) -> Result<BTreeMap<String, ArchSpec>> {
    #[derive(Deserialize)]
    struct Entry {
        layers: u64,
        hidden: u64,
        ffn: u64,
        #[serde(default = "default_mac")]
        mac_factor: u64,
    }
    let text = std::fs::read_to_string(path).map_err(|e| OcvtpError::storage(path, e))?;
    let raw: BTreeMap<String, Entry> =
        serde_json::from_str(&text).map_err(|e| OcvtpError::Format(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(name, e)| Ok((name.clone(), ArchSpec::new(name, e.layers, e.hidden, e.ffn, e.mac_factor)?)))
        .collect()
}

/// Exact per-term FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostTerms {
    pub attention_proj: u128,
    pub attention_quadratic: u128,
    pub ffn: u128,
    /// Argmax pass of the pruner (zero for transformer prefill).
    pub selection: u128,
}

impl CostTerms {
    pub fn total(&self) -> u128 {
        self.attention_proj + self.attention_quadratic + self.ffn + self.selection
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub n_vision: u64,
    pub n_text: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_flops: f64,
    pub terms: CostTerms,
    pub token_counts: TokenCounts,
}

impl CostReport {
    fn from_terms(terms: CostTerms, token_counts: TokenCounts) -> Self {
        CostReport {
            total_flops: terms.total() as f64,
            terms,
            token_counts,
        }
    }

    pub fn total_exact(&self) -> u128 {
        self.terms.total()
    }
}

/// `mac · L · (4nd² + 2n²d + 2ndm)` with `n = n_vision + n_text`.
pub fn prefill_flops(arch: &ArchSpec, n_vision: u64, n_text: u64) -> CostReport {
    let n = u128::from(n_vision + n_text);
    let (l, d, m, mac) = (
        u128::from(arch.layers),
        u128::from(arch.hidden),
        u128::from(arch.ffn),
        u128::from(arch.mac_factor),
    );
    let terms = CostTerms {
        attention_proj: mac * l * 4 * n * d * d,
        attention_quadratic: mac * l * 2 * n * n * d,
        ffn: mac * l * 2 * n * d * m,
        selection: 0,
    };
    CostReport::from_terms(terms, TokenCounts { n_vision, n_text })
}

/// Internal sizes of the slot-attention pruner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunerArch {
    /// Token channel width.
    pub c: u64,
    /// Attention width.
    pub d: u64,
    pub mlp_hidden: u64,
    pub iterations: u64,
    pub mac_factor: u64,
}

impl Default for PrunerArch {
    /// Sized for a ViT-L style encoder (1024 channels).
    fn default() -> Self {
        PrunerArch {
            c: 1024,
            d: 256,
            mlp_hidden: 1024,
            iterations: 3,
            mac_factor: 2,
        }
    }
}

/// Cost of one pruning pass over `n` reference tokens with budget `s`.
///
/// Projection term: key/value maps once, then per iteration the query map and
/// the three GRU gates. Quadratic term: per iteration the `s×n` logits and the
/// weighted-mean readout. FFN term: per iteration the residual MLP. Selection:
/// one comparison per attention entry.
pub fn pruner_flops(arch: &PrunerArch, n: u64, s: u64) -> Result<CostReport> {
    if arch.c == 0 || arch.d == 0 || arch.mlp_hidden == 0 || arch.iterations == 0 {
        return Err(OcvtpError::config("pruner_arch", "sizes must be positive"));
    }
    if !(1..=2).contains(&arch.mac_factor) {
        return Err(OcvtpError::config("mac_factor", "must be 1 or 2"));
    }
    let (c, d, h, t, mac) = (
        u128::from(arch.c),
        u128::from(arch.d),
        u128::from(arch.mlp_hidden),
        u128::from(arch.iterations),
        u128::from(arch.mac_factor),
    );
    let (n, s) = (u128::from(n), u128::from(s));
    let terms = CostTerms {
        attention_proj: mac * (2 * n * c * d + t * (s * c * d + 3 * (s * d * c + s * c * c))),
        attention_quadratic: mac * t * 2 * s * n * d,
        ffn: mac * t * 2 * s * c * h,
        selection: s * n,
    };
    Ok(CostReport::from_terms(
        terms,
        TokenCounts {
            n_vision: n as u64,
            n_text: 0,
        },
    ))
}

/// Human-readable FLOPs with a metric suffix and two decimals.
pub fn format_flops(flops: f64) -> String {
    const UNITS: [(f64, &str); 4] = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, unit) in UNITS {
        if flops >= scale {
            return format!("{:.2} {unit}", flops / scale);
        }
    }
    format!("{flops:.0}")
}

/// One comparison row: vanilla vs pruned prefill plus pruner overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub arch: String,
    pub n_vision: u64,
    pub n_kept: u64,
    pub n_text: u64,
    pub vanilla: CostReport,
    pub pruned: CostReport,
    pub pruner: CostReport,
}

impl CostRow {
    pub fn new(arch: &ArchSpec, pruner: &PrunerArch, n_vision: u64, n_kept: u64, n_text: u64) -> Result<Self> {
        if n_kept > n_vision {
            return Err(OcvtpError::config("kept", format!("{n_kept} kept of {n_vision} vision tokens")));
        }
        Ok(CostRow {
            arch: arch.name.clone(),
            n_vision,
            n_kept,
            n_text,
            vanilla: prefill_flops(arch, n_vision, n_text),
            pruned: prefill_flops(arch, n_kept, n_text),
            pruner: pruner_flops(pruner, n_vision, n_kept)?,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.pruned.total_flops / self.vanilla.total_flops
    }

    pub fn overhead(&self) -> f64 {
        self.pruner.total_flops / self.vanilla.total_flops
    }
}

pub fn cost_table_text(rows: &[CostRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>6} {:>6} {:>10} {:>10} {:>8} {:>10}",
        "arch", "vision", "kept", "text", "vanilla", "pruned", "ratio", "pruner"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>6} {:>6} {:>10} {:>10} {:>8.4} {:>10}",
            r.arch,
            r.n_vision,
            r.n_kept,
            r.n_text,
            format_flops(r.vanilla.total_flops),
            format_flops(r.pruned.total_flops),
            r.ratio(),
            format_flops(r.pruner.total_flops)
        );
    }
    out
}

pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("arch,n_vision,n_kept,n_text,vanilla_flops,pruned_flops,ratio,pruner_flops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{}",
            r.arch,
            r.n_vision,
            r.n_kept,
            r.n_text,
            r.vanilla.total_exact(),
            r.pruned.total_exact(),
            r.ratio(),
            r.pruner.total_exact()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the cost formula in floating point.
    fn oracle(l: f64, d: f64, m: f64, mac: f64, n: f64) -> f64 {
        mac * l * (4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m)
    }

    #[test]
    fn hand_example() {
        let arch = ArchSpec::new("toy", 1, 2, 4, 1).unwrap();
        let r = prefill_flops(&arch, 3, 0);
        assert_eq!(r.terms.attention_proj, 48);
        assert_eq!(r.terms.attention_quadratic, 36);
        assert_eq!(r.terms.ffn, 48);
        assert_eq!(r.total_exact(), 132);
    }

    #[test]
    fn matches_float_oracle() {
        let arch = ArchSpec::preset("llava-1.5").unwrap();
        for (v, t) in [(576, 32), (64, 32), (2880, 32), (160, 32)] {
            let r = prefill_flops(&arch, v, t);
            let o = oracle(32.0, 4096.0, 11008.0, 2.0, (v + t) as f64);
            assert!((r.total_flops - o).abs() / o < 1e-12);
        }
    }

    #[test]
    fn empty_prefill_is_free() {
        let arch = ArchSpec::preset("llava-next").unwrap();
        assert_eq!(prefill_flops(&arch, 0, 0).total_exact(), 0);
    }

    #[test]
    fn monotone_in_every_argument() {
        let base = ArchSpec::new("b", 4, 64, 128, 2).unwrap();
        let f = |a: &ArchSpec, v, t| prefill_flops(a, v, t).total_exact();
        assert!(f(&base, 11, 5) > f(&base, 10, 5));
        assert!(f(&base, 10, 6) > f(&base, 10, 5));
        for bumped in [
            ArchSpec { layers: 5, ..base.clone() },
            ArchSpec { hidden: 65, ..base.clone() },
            ArchSpec { ffn: 129, ..base.clone() },
        ] {
            assert!(f(&bumped, 10, 5) > f(&base, 10, 5));
        }
    }

    #[test]
    fn pruner_quadratic_term_linear_in_n() {
        let p = PrunerArch::default();
        let a = pruner_flops(&p, 576, 64).unwrap();
        let b = pruner_flops(&p, 1152, 64).unwrap();
        assert_eq!(b.terms.attention_quadratic, 2 * a.terms.attention_quadratic);
    }

    #[test]
    fn zero_budget_has_no_attention_cost() {
        let r = pruner_flops(&PrunerArch::default(), 576, 0).unwrap();
        assert_eq!(r.terms.attention_quadratic, 0);
        assert_eq!(r.terms.selection, 0);
    }

    #[test]
    fn bad_mac_factor_rejected() {
        assert!(matches!(
            ArchSpec::new("x", 1, 1, 1, 3),
            Err(OcvtpError::Config { field, .. }) if field == "mac_factor"
        ));
    }

    #[test]
    fn arch_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        std::fs::write(&path, r#"{"tiny": {"layers": 2, "hidden": 8, "ffn": 16}}"#).unwrap();
        let archs = load_arch_file(&path).unwrap();
        assert_eq!(archs["tiny"], ArchSpec::new("tiny", 2, 8, 16, 2).unwrap());
    }

    #[test]
    fn formatting() {
        assert_eq!(format_flops(6.3141e12), "6.31 T");
        assert_eq!(format_flops(5.97e9), "5.97 G");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let arch = ArchSpec::preset("llava-1.5").unwrap();
        let row = CostRow::new(&arch, &PrunerArch::default(), 576, 64, 32).unwrap();
        let csv = cost_table_csv(&[row]);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("llava-1.5,576,64,32,"));
    }
}
