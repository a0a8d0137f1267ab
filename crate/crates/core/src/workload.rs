//! Benchmark task models: timing and energy per memory region plus a
//! progress-indexed script of data accesses.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigError, SimError};
use crate::kernel::TaskId;
use crate::memory::RegionKind;
use crate::sim::Micros;

pub type ObjectId = u16;

/// Progress points are stored in hundredths of a percent.
pub const FULL_PROGRESS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Read(ObjectId),
    Write(ObjectId),
    Commit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    /// Progress point in hundredths of a percent.
    pub at: u32,
    pub action: Action,
}

impl ScriptStep {
    /// Offset into a run of `total_us` at which this step executes.
    pub fn offset_us(&self, total_us: Micros) -> Micros {
        (total_us * self.at as u64).div_ceil(FULL_PROGRESS as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub vm_time_us: Micros,
    pub nvm_time_us: Micros,
    pub vm_energy_nj: u64,
    pub nvm_energy_nj: u64,
    pub script: Vec<ScriptStep>,
    pub repeat: bool,
}

impl Workload {
    pub fn time_us(&self, region: RegionKind) -> Micros {
        match region {
            RegionKind::Vm => self.vm_time_us,
            RegionKind::Nvm => self.nvm_time_us,
        }
    }

    pub fn energy_nj(&self, region: RegionKind) -> u64 {
        match region {
            RegionKind::Vm => self.vm_energy_nj,
            RegionKind::Nvm => self.nvm_energy_nj,
        }
    }

    /// Average power while running in `region`, in watts.
    pub fn draw_w(&self, region: RegionKind) -> f64 {
        let t = self.time_us(region);
        if t == 0 {
            return 0.0;
        }
        self.energy_nj(region) as f64 / t as f64 * 1e-3
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.script.iter().filter_map(|s| match s.action {
            Action::Read(o) | Action::Write(o) => Some(o),
            Action::Commit => None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(format!("workload {}: {msg}", self.name)));
        if self.vm_time_us == 0 {
            return bad("vm_time_us must be positive".into());
        }
        if self.nvm_time_us < self.vm_time_us || self.nvm_energy_nj < self.vm_energy_nj {
            return bad("NVM time and energy must not be below the VM figures".into());
        }
        let Some(last) = self.script.last() else {
            return bad("empty script".into());
        };
        if last.action != Action::Commit {
            return bad("script must end with commit".into());
        }
        let mut prev = 0;
        for (i, s) in self.script.iter().enumerate() {
            if s.at > FULL_PROGRESS {
                return bad(format!("step {} beyond 100%", i + 1));
            }
            if s.at < prev {
                return bad(format!("step {} goes backwards", i + 1));
            }
            if s.action == Action::Commit && i + 1 != self.script.len() {
                return bad("commit must be the final step".into());
            }
            prev = s.at;
        }
        Ok(())
    }
}

fn step(pct: u32, action: Action) -> ScriptStep {
    ScriptStep {
        at: pct * 100,
        action,
    }
}

fn table_workload(name: &str, times_us: [Micros; 2], energy_nj: [u64; 2], script: Vec<ScriptStep>) -> Workload {
    Workload {
        name: name.to_string(),
        vm_time_us: times_us[0],
        nvm_time_us: times_us[1],
        vm_energy_nj: energy_nj[0],
        nvm_energy_nj: energy_nj[1],
        script,
        repeat: true,
    }
}

/// The five benchmark tasks.
///
/// SHA256 reads its four inputs right before it writes and commits the
/// digest object, so the read set reflects the latest committed results.
pub fn builtin_workloads() -> Vec<Workload> {
    let writer = |obj| vec![step(95, Action::Write(obj)), step(100, Action::Commit)];
    let mut sha = (0..4).map(|o| step(100, Action::Read(o))).collect::<Vec<_>>();
    sha.push(step(100, Action::Write(4)));
    sha.push(step(100, Action::Commit));
    vec![
        table_workload("MatMul", [439_000, 470_000], [1_670_000, 2_210_000], writer(0)),
        table_workload("FIR", [336_000, 352_000], [1_440_000, 1_560_000], writer(1)),
        table_workload("SHA256", [246_000, 265_000], [1_040_000, 1_370_000], sha),
        table_workload("FloatMath", [1_890, 1_900], [5_600, 5_700], writer(2)),
        table_workload("IntMath", [1_500, 1_530], [4_300, 4_400], writer(3)),
    ]
}

/// Folds one observed value into a task's running read digest.
pub fn fold_read(digest: &[u8; 32], obj: ObjectId, value: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(digest);
    h.update(obj.to_le_bytes());
    h.update(value);
    h.finalize().into()
}

/// The value a task writes: a pure function of who writes, where, the
/// write's index within the task, and everything the task read before it.
pub fn write_value(task: TaskId, obj: ObjectId, write_index: u32, read_digest: &[u8; 32], size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size);
    let mut block = 0u32;
    while out.len() < size {
        let mut h = Sha256::new();
        h.update(task.0.to_le_bytes());
        h.update(obj.to_le_bytes());
        h.update(write_index.to_le_bytes());
        h.update(read_digest);
        h.update(block.to_le_bytes());
        let d = h.finalize();
        let take = (size - out.len()).min(d.len());
        out.extend_from_slice(&d[..take]);
        block += 1;
    }
    out
}

fn parse_pct(s: &str) -> Option<u32> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 2 || int.is_empty() {
        return None;
    }
    let int: u32 = int.parse().ok()?;
    let frac_val: u32 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<2}").parse().ok()?
    };
    int.checked_mul(100)?.checked_add(frac_val)
}

fn fmt_pct(at: u32) -> String {
    if at.is_multiple_of(100) {
        (at / 100).to_string()
    } else {
        format!("{}.{:02}", at / 100, at % 100)
    }
}

#[derive(Default)]
struct Partial {
    line: usize,
    name: Option<String>,
    vm_time_us: Option<Micros>,
    nvm_time_us: Option<Micros>,
    vm_energy_nj: Option<u64>,
    nvm_energy_nj: Option<u64>,
    repeat: Option<bool>,
    script: Vec<ScriptStep>,
}

impl Partial {
    fn finish(self) -> Result<Workload, ConfigError> {
        let line = self.line;
        let missing = |key: &str| ConfigError::Parse {
            line,
            msg: format!("workload section missing `{key}`"),
        };
        let w = Workload {
            name: self.name.ok_or_else(|| missing("name"))?,
            vm_time_us: self.vm_time_us.ok_or_else(|| missing("vm_time_us"))?,
            nvm_time_us: self.nvm_time_us.ok_or_else(|| missing("nvm_time_us"))?,
            vm_energy_nj: self.vm_energy_nj.ok_or_else(|| missing("vm_energy_nj"))?,
            nvm_energy_nj: self.nvm_energy_nj.ok_or_else(|| missing("nvm_energy_nj"))?,
            script: self.script,
            repeat: self.repeat.unwrap_or(true),
        };
        w.validate().map_err(|e| ConfigError::Parse {
            line,
            msg: e.to_string(),
        })?;
        Ok(w)
    }
}

/// Parses the plain-text workload format.
///
/// ```text
/// [workload]
/// name = Reader
/// vm_time_us = 2000
/// nvm_time_us = 2100
/// vm_energy_nj = 6000
/// nvm_energy_nj = 6500
/// at 5 read 0
/// at 95 write 1
/// commit
/// ```
pub fn parse_workloads(text: &str) -> Result<Vec<Workload>, ConfigError> {
    let mut out = Vec::new();
    let mut cur: Option<Partial> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| ConfigError::Parse { line, msg };
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        if l == "[workload]" {
            if let Some(p) = cur.take() {
                out.push(p.finish()?);
            }
            cur = Some(Partial {
                line,
                ..Partial::default()
            });
            continue;
        }
        let p = cur
            .as_mut()
            .ok_or_else(|| err("content before the first [workload] header".into()))?;
        if let Some((k, v)) = l.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<u64>().map_err(|_| err(format!("`{k}` expects an integer")));
            match k {
                "name" => p.name = Some(v.to_string()),
                "vm_time_us" => p.vm_time_us = Some(num()?),
                "nvm_time_us" => p.nvm_time_us = Some(num()?),
                "vm_energy_nj" => p.vm_energy_nj = Some(num()?),
                "nvm_energy_nj" => p.nvm_energy_nj = Some(num()?),
                "repeat" => {
                    p.repeat = Some(v.parse().map_err(|_| err("`repeat` expects true or false".into()))?)
                }
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
            continue;
        }
        let words: Vec<&str> = l.split_whitespace().collect();
        let s = match words.as_slice() {
            ["commit"] => ScriptStep {
                at: FULL_PROGRESS,
                action: Action::Commit,
            },
            ["at", pct, verb, obj] => {
                let at = parse_pct(pct).ok_or_else(|| err(format!("bad progress `{pct}`")))?;
                let obj: ObjectId = obj.parse().map_err(|_| err(format!("bad object id `{obj}`")))?;
                let action = match *verb {
                    "read" => Action::Read(obj),
                    "write" => Action::Write(obj),
                    _ => return Err(err(format!("unknown action `{verb}`"))),
                };
                ScriptStep { at, action }
            }
            _ => return Err(err(format!("cannot parse `{l}`"))),
        };
        p.script.push(s);
    }
    if let Some(p) = cur.take() {
        out.push(p.finish()?);
    }
    Ok(out)
}

pub fn load_workload_file(path: &Path) -> Result<Vec<Workload>, SimError> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_workloads(&text)?)
}

pub fn workloads_to_text(ws: &[Workload]) -> String {
    let mut s = String::new();
    for w in ws {
        let _ = writeln!(s, "[workload]");
        let _ = writeln!(s, "name = {}", w.name);
        let _ = writeln!(s, "vm_time_us = {}", w.vm_time_us);
        let _ = writeln!(s, "nvm_time_us = {}", w.nvm_time_us);
        let _ = writeln!(s, "vm_energy_nj = {}", w.vm_energy_nj);
        let _ = writeln!(s, "nvm_energy_nj = {}", w.nvm_energy_nj);
        let _ = writeln!(s, "repeat = {}", w.repeat);
        for st in &w.script {
            match st.action {
                Action::Commit => {
                    let _ = writeln!(s, "commit");
                }
                Action::Read(o) => {
                    let _ = writeln!(s, "at {} read {o}", fmt_pct(st.at));
                }
                Action::Write(o) => {
                    let _ = writeln!(s, "at {} write {o}", fmt_pct(st.at));
                }
            }
        }
        s.push('\n');
    }
    s
}

/// A random short workload touching objects below `objects`.
pub fn random_workload<R: Rng>(rng: &mut R, name: &str, objects: u16, max_time_us: Micros) -> Workload {
    let vm_time_us = rng.gen_range(200..=max_time_us.max(201));
    let nvm_time_us = vm_time_us + vm_time_us * rng.gen_range(0..=10) / 100;
    let vm_energy_nj = vm_time_us * rng.gen_range(2..=5);
    let nvm_energy_nj = vm_energy_nj + vm_energy_nj * rng.gen_range(0..=30) / 100;
    let n = rng.gen_range(1..=4);
    let mut pts: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=FULL_PROGRESS)).collect();
    pts.sort_unstable();
    let mut script: Vec<ScriptStep> = pts
        .into_iter()
        .map(|at| {
            let o = rng.gen_range(0..objects);
            let action = if rng.gen_bool(0.5) {
                Action::Read(o)
            } else {
                Action::Write(o)
            };
            ScriptStep { at, action }
        })
        .collect();
    script.push(ScriptStep {
        at: FULL_PROGRESS,
        action: Action::Commit,
    });
    Workload {
        name: name.to_string(),
        vm_time_us,
        nvm_time_us,
        vm_energy_nj,
        nvm_energy_nj,
        script,
        repeat: rng.gen_bool(0.7),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn by_name(name: &str) -> Workload {
        builtin_workloads().into_iter().find(|w| w.name == name).unwrap()
    }

    #[test]
    fn table_figures() {
        assert_eq!(by_name("IntMath").time_us(RegionKind::Vm), 1_500);
        assert_eq!(by_name("IntMath").time_us(RegionKind::Nvm), 1_530);
        assert_eq!(by_name("MatMul").energy_nj(RegionKind::Nvm), 2_210_000);
        let sha = by_name("SHA256");
        let reads: Vec<_> = sha
            .script
            .iter()
            .filter_map(|s| match s.action {
                Action::Read(o) => Some(o),
                _ => None,
            })
            .collect();
        assert_eq!(reads, vec![0, 1, 2, 3]);
        for w in builtin_workloads() {
            w.validate().unwrap();
            assert!(w.repeat);
        }
    }

    #[test]
    fn draw_reconstructs_platform_peak_order() {
        let peak = builtin_workloads()
            .iter()
            .map(|w| w.draw_w(RegionKind::Nvm))
            .fold(0.0, f64::max);
        assert!(peak > 4e-3 && peak < 6e-3, "{peak}");
    }

    #[test]
    fn offsets_round_up() {
        let s = step(95, Action::Write(0));
        assert_eq!(s.offset_us(1_500), 1_425);
        assert_eq!(s.offset_us(1), 1);
        assert_eq!(step(0, Action::Read(0)).offset_us(1_000), 0);
    }

    #[test]
    fn file_round_trip() {
        let ws = builtin_workloads();
        let back = parse_workloads(&workloads_to_text(&ws)).unwrap();
        assert_eq!(back, ws);
    }

    #[test]
    fn missing_field_reports_line() {
        let text = "\n[workload]\nname = A\nvm_time_us = 10\nnvm_time_us = 10\nvm_energy_nj = 1\ncommit\n";
        let err = parse_workloads(text).unwrap_err();
        assert_eq!(
            err,
            ConfigError::Parse {
                line: 2,
                msg: "workload section missing `nvm_energy_nj`".into()
            }
        );
        let err = parse_workloads("[workload]\nat x read 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn fractional_progress() {
        assert_eq!(parse_pct("2.5"), Some(250));
        assert_eq!(parse_pct("100"), Some(10_000));
        assert_eq!(parse_pct("1.234"), None);
        assert_eq!(fmt_pct(250), "2.50");
    }

    #[test]
    fn generated_workloads_parse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ws: Vec<_> = (0..50)
            .map(|i| random_workload(&mut rng, &format!("w{i}"), 5, 20_000))
            .collect();
        for w in &ws {
            w.validate().unwrap();
        }
        assert_eq!(parse_workloads(&workloads_to_text(&ws)).unwrap(), ws);
    }

    #[test]
    fn write_values_are_pure() {
        let d = [0u8; 32];
        let a = write_value(TaskId(1), 2, 0, &d, 100);
        assert_eq!(a.len(), 100);
        assert_eq!(a, write_value(TaskId(1), 2, 0, &d, 100));
        assert_ne!(a, write_value(TaskId(2), 2, 0, &d, 100));
        let d2 = fold_read(&d, 0, &[1, 2]);
        assert_ne!(a, write_value(TaskId(1), 2, 0, &d2, 100));
    }
}
