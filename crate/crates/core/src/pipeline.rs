//! End-to-end stages. Every stage reads its inputs back from the run
//! directory, so each number in the report can be rebuilt from the persisted
//! artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{eval_set, synthesize_dataset, Dataset, DatasetSpec, Sample};
use crate::embed_lens::{
    calibration_residual, drift_decompose, drift_similarity_table, logitlens_corpus, logitlens_decode,
    residual_from_features, u0_norm_correlation, u0_spatial_map, DriftDecomposition, EmbedLensError,
    ProjectedResidual,
};
use crate::io::TensorFileError;
use crate::linalg::LinalgError;
use crate::metrics::{self, CiderCorpus, MetricsError, MetricsReport};
use crate::model::{ModelBundle, ModelError, Projector, GRID};
use crate::probe::{from_pairs, train_probe, ProbeError};
use crate::store::{
    read_dataset, read_json, read_projector, to_json_pretty, write_bundle, write_dataset, write_file,
    write_projector, write_tensor_set, Artifact, RunDir, StoreError,
};
use crate::tensor::{Tensor, TensorError};
use crate::train::{is_attack_success, train_projector, EvalFixture, Example, TrainConfig, TrainError};
use crate::weight_lens::{
    neuron_overlap, neuron_stats, projector_hash, residual_svd_report, tensor_hash, weight_residual,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Diverged(_) => 3,
            PipelineError::Store(StoreError::Missing { .. }) => 4,
            PipelineError::Store(StoreError::Tensor(TensorFileError::Io { .. })) => 4,
            PipelineError::Store(StoreError::Io { .. }) => 4,
            PipelineError::Store(StoreError::HashMismatch { .. }) => 5,
            _ => 1,
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => PipelineError::Diverged(e),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

macro_rules! other_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Other(e.to_string())
            }
        }
    )*};
}
other_from!(ModelError, LinalgError, TensorError, MetricsError, ProbeError, EmbedLensError, TensorFileError);

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Inject,
    Eval,
    Probe,
    Wlens,
    Surgery,
    Elens,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Inject,
        Stage::Eval,
        Stage::Probe,
        Stage::Wlens,
        Stage::Surgery,
        Stage::Elens,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Inject => "inject",
            Stage::Eval => "eval",
            Stage::Probe => "probe",
            Stage::Wlens => "wlens",
            Stage::Surgery => "surgery",
            Stage::Elens => "elens",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Inject => &[Stage::Synth],
            Stage::Eval | Stage::Probe | Stage::Wlens | Stage::Surgery | Stage::Elens => {
                &[Stage::Synth, Stage::Inject]
            }
            Stage::Report => &[
                Stage::Synth,
                Stage::Inject,
                Stage::Eval,
                Stage::Probe,
                Stage::Wlens,
                Stage::Surgery,
                Stage::Elens,
            ],
        }
    }
}

/// Whether a stage ran or was found complete and verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Verified,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub run: RunDir,
    timings: BTreeMap<String, f64>,
}

type Arts = BTreeMap<String, Artifact>;

fn put_json<T: Serialize>(run: &RunDir, arts: &mut Arts, role: &str, rel: &str, v: &T) -> Result<()> {
    arts.insert(role.into(), run.put(rel, to_json_pretty(v).as_bytes())?);
    Ok(())
}

fn put_text(run: &RunDir, arts: &mut Arts, role: &str, rel: &str, text: &str) -> Result<()> {
    arts.insert(role.into(), run.put(rel, text.as_bytes())?);
    Ok(())
}

fn file_artifact(run: &RunDir, rel: &str) -> Result<Artifact> {
    Ok(Artifact {
        path: rel.to_string(),
        sha256: crate::store::sha256_file(&run.path(rel))?,
        content_sha256: None,
    })
}

/// Held-out scenes after the frozen encoder.
struct EvalData {
    clean: Vec<Tensor>,
    triggered: Vec<Tensor>,
    clean_targets: Vec<Vec<usize>>,
    bkd_targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    /// Exact match on clean inputs.
    pub clean_em: f64,
    /// Exact match of the clean answer on triggered inputs.
    pub triggered_em: f64,
    pub asr: f64,
}

impl Pipeline {
    pub fn open(cfg: RunConfig, out: &Path) -> Result<Pipeline> {
        cfg.validate().map_err(PipelineError::Config)?;
        let hash = cfg.hash();
        let run = RunDir::open(out.join(&hash), &hash, SCHEMA_VERSION)?;
        let cpath = run.path("config.json");
        let canonical = cfg.canonical_json();
        if cpath.exists() {
            let found = std::fs::read_to_string(&cpath).map_err(|e| StoreError::Io {
                path: cpath.display().to_string(),
                source: e,
            })?;
            if found.trim_end() != canonical {
                return Err(StoreError::HashMismatch {
                    path: "config.json".into(),
                    expected: hash,
                    found: "edited config".into(),
                }
                .into());
            }
        } else {
            write_file(&cpath, format!("{canonical}\n").as_bytes())?;
        }
        let timings = read_json(&run.path("timings.json")).unwrap_or_default();
        Ok(Pipeline { cfg, run, timings })
    }

    pub fn root(&self) -> &Path {
        &self.run.root
    }

    /// Runs `stage` unless its artifacts already exist, in which case they are
    /// verified against the manifest instead.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome> {
        let missing: Vec<String> = stage
            .deps()
            .iter()
            .filter(|d| !self.run.has_stage(d.name()))
            .map(|d| format!("stage `{}`", d.name()))
            .collect();
        if !missing.is_empty() {
            return Err(StoreError::Missing {
                stage: stage.name().into(),
                missing,
            }
            .into());
        }
        for d in stage.deps() {
            self.run.verify_stage(d.name())?;
        }
        if self.run.has_stage(stage.name()) {
            self.run.verify_stage(stage.name())?;
            return Ok(StageOutcome::Verified);
        }
        let t0 = Instant::now();
        let arts = match stage {
            Stage::Synth => self.synth()?,
            Stage::Inject => self.inject()?,
            Stage::Eval => self.eval()?,
            Stage::Probe => self.probe()?,
            Stage::Wlens => self.wlens()?,
            Stage::Surgery => self.surgery()?,
            Stage::Elens => self.elens()?,
            Stage::Report => self.report()?,
        };
        self.run.record(stage.name(), arts)?;
        self.timings.insert(stage.name().into(), t0.elapsed().as_secs_f64());
        write_file(&self.run.path("timings.json"), to_json_pretty(&self.timings).as_bytes())?;
        Ok(StageOutcome::Ran)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn bundle(&self) -> Result<ModelBundle> {
        Ok(crate::store::read_bundle(&self.run.root, "model")?)
    }

    fn dataset(&self, role: &str) -> Result<Dataset> {
        let a = self.run.artifact("synth", role)?;
        Ok(read_dataset(&self.run.path(&a.path))?)
    }

    fn projectors(&self) -> Result<(Projector, Projector)> {
        Ok((
            read_projector(&self.run.root, "proj_c")?,
            read_projector(&self.run.root, "proj_p")?,
        ))
    }

    fn encode_all(bundle: &ModelBundle, ds: &Dataset) -> Result<Vec<Tensor>> {
        ds.samples
            .iter()
            .map(|s| Ok(bundle.encoder.encode(&s.image)?))
            .collect()
    }

    fn eval_data(&self, bundle: &ModelBundle) -> Result<EvalData> {
        let clean = self.dataset("eval_clean")?;
        let trig = self.dataset("eval_triggered")?;
        Ok(EvalData {
            clean: Self::encode_all(bundle, &clean)?,
            triggered: Self::encode_all(bundle, &trig)?,
            clean_targets: clean.samples.iter().map(|s| s.target.clone()).collect(),
            bkd_targets: trig.samples.iter().map(|s| s.target.clone()).collect(),
        })
    }

    fn synth(&mut self) -> Result<Arts> {
        let cfg = &self.cfg;
        let family = cfg.family();
        let mut arts = Arts::new();
        let bundle = ModelBundle::init(cfg.model_seed, cfg.head);
        let bm = write_bundle(&self.run.root, "model", &bundle, cfg.head)?;
        arts.insert("model.bundle".into(), file_artifact(&self.run, "model/bundle.json")?);
        for (name, rel) in &bm.tensors {
            arts.insert(format!("model.{name}"), file_artifact(&self.run, rel)?);
        }

        let pre = synthesize_dataset(
            &DatasetSpec {
                n_clean: cfg.pretrain.n,
                poison_rate: 0.0,
                family,
                seed: cfg.pretrain.data_seed,
            },
            &cfg.trigger,
        );
        let train = synthesize_dataset(&cfg.dataset, &cfg.trigger);
        let ev = eval_set(cfg.analysis.eval_n, cfg.analysis.eval_seed, &cfg.trigger);
        let eval_clean = Dataset {
            samples: ev
                .clean
                .iter()
                .zip(&ev.targets)
                .map(|(img, t)| Sample {
                    image: img.clone(),
                    target: t.clone(),
                    poisoned: false,
                    family,
                })
                .collect(),
        };
        let eval_trig = Dataset {
            samples: ev
                .triggered
                .iter()
                .zip(&ev.targets)
                .map(|(img, t)| Sample {
                    image: img.clone(),
                    target: family.target(t),
                    poisoned: true,
                    family,
                })
                .collect(),
        };
        let data_dir = self.run.path("data");
        for (role, ds) in [
            ("pretrain", &pre),
            ("train", &train),
            ("eval_clean", &eval_clean),
            ("eval_triggered", &eval_trig),
        ] {
            write_dataset(&data_dir, role, ds)?;
            let mut a = file_artifact(&self.run, &format!("data/{role}.jsonl"))?;
            a.content_sha256 = Some(ds.hash());
            arts.insert(role.into(), a);
        }
        Ok(arts)
    }

    fn inject(&mut self) -> Result<Arts> {
        let cfg = self.cfg.clone();
        let bundle = self.bundle()?;
        let frozen_before = frozen_hash(&bundle);
        let pre = self.dataset("pretrain")?;
        let train = self.dataset("train")?;
        let ev = self.eval_data(&bundle)?;
        let fx = EvalFixture {
            clean: &ev.clean,
            triggered: &ev.triggered,
            targets: &ev.clean_targets,
            family: cfg.family(),
        };

        let pre_f = Self::encode_all(&bundle, &pre)?;
        let pre_ex = examples(&pre, &pre_f);
        let pre_cfg = TrainConfig {
            epochs: cfg.pretrain.epochs,
            seed: cfg.pretrain.train_seed,
            ..cfg.train.clone()
        };
        let (proj_c, log_c) = train_projector(&pre_ex, &bundle.projector, &bundle.head, &pre_cfg, Some(&fx))?;

        let tr_f = Self::encode_all(&bundle, &train)?;
        let tr_ex = examples(&train, &tr_f);
        let (proj_p, log_p) = train_projector(&tr_ex, &proj_c, &bundle.head, &cfg.train, Some(&fx))?;

        let frozen_after = frozen_hash(&bundle);
        if frozen_before != frozen_after {
            return Err(PipelineError::Other("frozen components changed during training".into()));
        }
        let mut arts = Arts::new();
        for (dir, p) in [("proj_c", &proj_c), ("proj_p", &proj_p)] {
            for (name, rel) in write_projector(&self.run.root, dir, p)? {
                arts.insert(format!("{dir}.{name}"), file_artifact(&self.run, &rel)?);
            }
        }
        put_text(&self.run, &mut arts, "log_clean", "train_log_clean.csv", &log_c.to_csv())?;
        put_text(&self.run, &mut arts, "log", "train_log.csv", &log_p.to_csv())?;
        let summary = json!({
            "frozen_hash": frozen_after,
            "proj_c_hash": projector_hash(&proj_c),
            "proj_p_hash": projector_hash(&proj_p),
            "pretrain": log_c.epochs.last(),
            "finetune": log_p.epochs.last(),
            "finetune_first": log_p.epochs.first(),
        });
        put_json(&self.run, &mut arts, "summary", "inject.json", &summary)?;
        Ok(arts)
    }

    fn eval(&mut self) -> Result<Arts> {
        let bundle = self.bundle()?;
        let (pc, pp) = self.projectors()?;
        let ev = self.eval_data(&bundle)?;
        let family = self.cfg.family();
        let corpus_docs: Vec<Vec<Vec<usize>>> = ev.clean_targets.iter().map(|t| vec![t.clone()]).collect();
        let corpus = CiderCorpus::new(&corpus_docs);
        let mut outputs = BTreeMap::new();
        let mut table = BTreeMap::new();
        for (name, p) in [("clean_model", &pc), ("backdoor_model", &pp)] {
            let mut per_input = BTreeMap::new();
            let mut outs = BTreeMap::new();
            for (input, feats) in [("clean_inputs", &ev.clean), ("triggered_inputs", &ev.triggered)] {
                let embs: Vec<Tensor> = feats.iter().map(|f| p.project(f)).collect::<std::result::Result<_, _>>()?;
                let o: Vec<Vec<usize>> = embs
                    .iter()
                    .map(|e| bundle.head.decode_greedy(e))
                    .collect::<std::result::Result<_, _>>()?;
                let bkd: Vec<Vec<usize>> = ev.clean_targets.iter().map(|t| family.target(t)).collect();
                let n = o.len() as f64;
                let report = MetricsReport {
                    asr: metrics::asr(&o, &bkd, family.match_rule())?,
                    p_bkd: metrics::p_bkd(&embs, &bundle.head, &bkd)?,
                    p_clean: metrics::p_bkd(&embs, &bundle.head, &ev.clean_targets)?,
                    exact_match: metrics::exact_match(&o, &ev.clean_targets)?,
                    cider: o
                        .iter()
                        .zip(&ev.clean_targets)
                        .map(|(c, t)| corpus.score(c, std::slice::from_ref(t)).score)
                        .sum::<f64>()
                        / n,
                    rouge_l: o
                        .iter()
                        .zip(&ev.clean_targets)
                        .map(|(c, t)| metrics::rouge_l(c, t))
                        .sum::<f64>()
                        / n,
                };
                per_input.insert(input, report);
                outs.insert(input, o);
            }
            table.insert(name, per_input);
            outputs.insert(name, outs);
        }
        let mut arts = Arts::new();
        put_json(&self.run, &mut arts, "outputs", "eval/outputs.json", &outputs)?;
        let metrics = json!({
            "family": family,
            "match_rule": family.match_rule(),
            "table": table,
        });
        put_json(&self.run, &mut arts, "metrics", "eval/metrics.json", &metrics)?;
        let mut csv = String::from("model,inputs,asr,p_bkd,p_clean,exact_match,cider,rouge_l\n");
        for (m, rows) in &table {
            for (i, r) in rows {
                csv.push_str(&format!(
                    "{m},{i},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                    r.asr, r.p_bkd, r.p_clean, r.exact_match, r.cider, r.rouge_l
                ));
            }
        }
        put_text(&self.run, &mut arts, "table", "eval/table1.csv", &csv)?;
        Ok(arts)
    }

    fn probe(&mut self) -> Result<Arts> {
        let bundle = self.bundle()?;
        let (pc, pp) = self.projectors()?;
        let ev = self.eval_data(&bundle)?;
        let mut arts = Arts::new();
        let mut rows = BTreeMap::new();
        for (name, p) in [("backdoor_projector", &pp), ("clean_projector", &pc)] {
            let pool = |fs: &[Tensor]| -> Result<Vec<Vec<f32>>> { fs.iter().map(|f| Ok(p.pooled(f)?)).collect() };
            let ds = from_pairs(pool(&ev.triggered)?, pool(&ev.clean)?);
            let run = train_probe(&ds, self.cfg.probe_seed, &self.cfg.probe)?;
            let named: Vec<(String, &Tensor)> = run
                .model
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, (w, b))| [(format!("L{i}_W"), w), (format!("L{i}_b"), b)])
                .collect();
            let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
            let dir = format!("probe/{name}");
            for (n, rel) in write_tensor_set(&self.run.root, &dir, &refs)? {
                arts.insert(format!("{name}.{n}"), file_artifact(&self.run, &rel)?);
            }
            rows.insert(
                name,
                json!({
                    "precision": run.test.precision,
                    "recall": run.test.recall,
                    "f1": run.test.f1,
                    "degenerate": run.test.degenerate,
                    "test_accuracy": run.test_accuracy,
                    "n_train": run.train_idx.len(),
                    "n_test": run.test_idx.len(),
                }),
            );
        }
        let u = utility(&pp, &bundle, &ev, self.cfg.family());
        let summary = json!({
            "trigger": self.cfg.trigger,
            "trigger_kind": self.cfg.trigger.name(),
            "asr": u.asr,
            "probes": rows,
        });
        put_json(&self.run, &mut arts, "summary", "probe/probe.json", &summary)?;
        let mut csv = String::from("trigger,projector,asr,precision,recall,f1\n");
        for (name, r) in &rows {
            csv.push_str(&format!(
                "{},{name},{:.4},{:.4},{:.4},{:.4}\n",
                self.cfg.trigger.name(),
                u.asr,
                r["precision"].as_f64().unwrap_or(0.0),
                r["recall"].as_f64().unwrap_or(0.0),
                r["f1"].as_f64().unwrap_or(0.0)
            ));
        }
        put_text(&self.run, &mut arts, "table", "probe/table2.csv", &csv)?;
        Ok(arts)
    }

    fn wlens(&mut self) -> Result<Arts> {
        let bundle = self.bundle()?;
        let (pc, pp) = self.projectors()?;
        let ev = self.eval_data(&bundle)?;
        let r = weight_residual(&pc, &pp)?;
        let [s1, s2] = residual_svd_report(&r)?;
        let mut arts = Arts::new();
        put_text(&self.run, &mut arts, "spectrum_W1", "wlens/spectrum_W1.csv", &s1.to_csv())?;
        put_text(&self.run, &mut arts, "spectrum_W2", "wlens/spectrum_W2.csv", &s2.to_csv())?;
        let clean = neuron_stats(&pp, &ev.clean, "clean")?;
        let poison = neuron_stats(&pp, &ev.triggered, "poison")?;
        let ov = neuron_overlap(&clean, &poison);
        let mut ncsv = String::from("neuron,magnitude_clean,magnitude_poison,frequency_clean,frequency_poison\n");
        for j in 0..clean.magnitude.len() {
            ncsv.push_str(&format!(
                "{j},{:.6},{:.6},{:.6},{:.6}\n",
                clean.magnitude[j], poison.magnitude[j], clean.frequency[j], poison.frequency[j]
            ));
        }
        put_text(&self.run, &mut arts, "neurons", "wlens/neurons.csv", &ncsv)?;
        let mut hcsv = String::from("metric,bin,lo,hi,clean,poison\n");
        for (m, o) in [("magnitude", &ov.magnitude), ("frequency", &ov.frequency)] {
            let bins = o.clean_hist.counts.len();
            let w = (o.clean_hist.hi - o.clean_hist.lo) / bins as f64;
            for b in 0..bins {
                hcsv.push_str(&format!(
                    "{m},{b},{:.6},{:.6},{},{}\n",
                    o.clean_hist.lo + w * b as f64,
                    o.clean_hist.lo + w * (b + 1) as f64,
                    o.clean_hist.counts[b],
                    o.poison_hist.counts[b]
                ));
            }
        }
        put_text(&self.run, &mut arts, "histograms", "wlens/neuron_hist.csv", &hcsv)?;
        let layer = |s: &crate::weight_lens::LayerSpectrum, t: &Tensor| {
            json!({
                "frobenius": t.frobenius_norm(),
                "top1_energy": s.spectrum.cumulative_energy.first(),
                "top3_energy": s.spectrum.cumulative_energy.get(2),
                "degenerate": s.spectrum.degenerate,
                "sigma_head": &s.spectrum.values[..s.spectrum.values.len().min(8)],
            })
        };
        let summary = json!({
            "clean_hash": r.clean_hash,
            "poisoned_hash": r.poisoned_hash,
            "dW1": layer(&s1, &r.dw1),
            "dW2": layer(&s2, &r.dw2),
            "db1_norm": r.db1.frobenius_norm(),
            "db2_norm": r.db2.frobenius_norm(),
            "neurons": {
                "magnitude": {"intersection": ov.magnitude.intersection, "max_abs_delta": ov.magnitude.max_abs_delta, "argmax_neuron": ov.magnitude.argmax_neuron},
                "frequency": {"intersection": ov.frequency.intersection, "max_abs_delta": ov.frequency.max_abs_delta, "argmax_neuron": ov.frequency.argmax_neuron},
                "min_magnitude": clean.magnitude.iter().chain(&poison.magnitude).cloned().fold(f64::INFINITY, f64::min),
            },
        });
        put_json(&self.run, &mut arts, "summary", "wlens/wlens.json", &summary)?;
        put_json(&self.run, &mut arts, "stats", "wlens/neuron_stats.json", &json!({"clean": clean, "poison": poison}))?;
        Ok(arts)
    }

    fn surgery(&mut self) -> Result<Arts> {
        let bundle = self.bundle()?;
        let (pc, pp) = self.projectors()?;
        let ev = self.eval_data(&bundle)?;
        let family = self.cfg.family();
        let a = &self.cfg.analysis;
        let r = weight_residual(&pc, &pp)?;
        let [s1, s2] = residual_svd_report(&r)?;
        let kmax = a.k_max.max(a.k1).max(a.k2);
        let approx1: Vec<Tensor> = (0..=kmax).map(|k| s1.svd.truncated(k)).collect();
        let approx2: Vec<Tensor> = (0..=kmax).map(|k| s2.svd.truncated(k)).collect();
        let build = |base: &Projector, k1: usize, k2: usize, sign: f32| -> Result<Projector> {
            let mut p = base.clone();
            if k1 > 0 {
                p.w1 = p.w1.add(&approx1[k1].scale(sign))?;
            }
            if k2 > 0 {
                p.w2 = p.w2.add(&approx2[k2].scale(sign))?;
            }
            Ok(p)
        };
        let mut cells = Vec::new();
        let mut pairs: Vec<(usize, usize)> = (0..=a.k_max)
            .flat_map(|i| (0..=a.k_max).map(move |j| (i, j)))
            .collect();
        if !pairs.contains(&(a.k1, a.k2)) {
            pairs.push((a.k1, a.k2));
        }
        let mut csv = String::from("mode,k1,k2,asr,clean_em,triggered_em\n");
        for (mode, base, sign) in [("remove", &pp, -1.0f32), ("recover", &pc, 1.0f32)] {
            for &(k1, k2) in &pairs {
                let p = build(base, k1, k2, sign)?;
                let u = utility(&p, &bundle, &ev, family);
                csv.push_str(&format!(
                    "{mode},{k1},{k2},{:.4},{:.4},{:.4}\n",
                    u.asr, u.clean_em, u.triggered_em
                ));
                cells.push(json!({"mode": mode, "k1": k1, "k2": k2, "utility": u}));
            }
        }
        let mut arts = Arts::new();
        put_text(&self.run, &mut arts, "grid", "surgery/grid.csv", &csv)?;
        let summary = json!({
            "clean_model": utility(&pc, &bundle, &ev, family),
            "backdoor_model": utility(&pp, &bundle, &ev, family),
            "selected": {"k1": a.k1, "k2": a.k2},
            "bias_residual_norms": {"b1": r.db1.frobenius_norm(), "b2": r.db2.frobenius_norm()},
            "cells": cells,
        });
        put_json(&self.run, &mut arts, "summary", "surgery/surgery.json", &summary)?;
        Ok(arts)
    }

    fn elens(&mut self) -> Result<Arts> {
        let bundle = self.bundle()?;
        let (pc, pp) = self.projectors()?;
        let ev = self.eval_data(&bundle)?;
        let family = self.cfg.family();
        let a = self.cfg.analysis.clone();
        let decompose = |feats: &[Tensor], poisoned: bool| -> Result<(Vec<ProjectedResidual>, Vec<DriftDecomposition>)> {
            let mut rs = Vec::new();
            let mut ds = Vec::new();
            for (i, f) in feats.iter().enumerate() {
                let r = residual_from_features(f, &pc, &pp, i, poisoned)?;
                ds.push(drift_decompose(&r)?);
                rs.push(r);
            }
            Ok((rs, ds))
        };
        let (_, dc) = decompose(&ev.clean, false)?;
        let (_, dp) = decompose(&ev.triggered, true)?;
        let table = drift_similarity_table(&dc, &dp, a.max_pairs, a.sampling_seed)?;
        let mut arts = Arts::new();
        put_text(&self.run, &mut arts, "similarity", "elens/similarity.csv", &table.to_csv())?;

        let mut spectra = String::from("group,sample,index,sigma\n");
        for (g, ds) in [("clean", &dc), ("poison", &dp)] {
            for d in ds.iter() {
                for (i, s) in d.spectrum.iter().enumerate() {
                    spectra.push_str(&format!("{g},{},{i},{s:.6e}\n", d.sample_id));
                }
            }
        }
        put_text(&self.run, &mut arts, "spectra", "elens/spectra.csv", &spectra)?;

        let markers = family.marker_tokens();
        let mut lens = BTreeMap::new();
        let mut lens_csv = String::new();
        for (g, ds) in [("clean", &dc), ("poison", &dp)] {
            let decoded = ds
                .iter()
                .map(|d| logitlens_decode(&d.v0, &bundle.head, a.topk))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let corpus = logitlens_corpus(&decoded, markers);
            for line in corpus.to_csv().lines().skip(if lens_csv.is_empty() { 0 } else { 1 }) {
                let line = if line.starts_with("rank") { format!("group,{line}") } else { format!("{g},{line}") };
                lens_csv.push_str(&line);
                lens_csv.push('\n');
            }
            let mass = decoded.iter().map(|d| d.total_probability).fold(0.0f64, |m, p| m.max((p - 1.0).abs()));
            lens.insert(
                g,
                json!({
                    "marker_hit_rate": corpus.marker_hit_rate,
                    "top1": corpus.rank_frequency.first().map(|r| &r[..r.len().min(5)]),
                    "max_mass_error": mass,
                }),
            );
        }
        put_text(&self.run, &mut arts, "logitlens", "elens/logitlens.csv", &lens_csv)?;

        let mut corr_csv = String::from("group,sample,token,token_norm,u0\n");
        let mut corr = BTreeMap::new();
        let mut all_r = Vec::new();
        for (g, ds, feats) in [("clean", &dc, &ev.clean), ("poison", &dp, &ev.triggered)] {
            let mut rs = Vec::new();
            let mut flips = 0;
            for (d, f) in ds.iter().zip(feats.iter()) {
                let c = u0_norm_correlation(d, f)?;
                rs.push(c.r);
                flips += c.flipped as usize;
                let norms = crate::tensor::row_l2_norms(f)?;
                let sign = if c.flipped { -1.0 } else { 1.0 };
                for (t, (n, u)) in norms.data().iter().zip(&d.u0).enumerate() {
                    corr_csv.push_str(&format!("{g},{},{t},{n:.6},{:.6}\n", d.sample_id, sign * u));
                }
            }
            let mean = rs.iter().sum::<f64>() / rs.len() as f64;
            all_r.extend_from_slice(&rs);
            corr.insert(g, json!({"mean_r": mean, "min_r": rs.iter().cloned().fold(f64::INFINITY, f64::min), "flipped": flips}));
        }
        put_text(&self.run, &mut arts, "correlation", "elens/correlation.csv", &corr_csv)?;
        let mean_r = all_r.iter().sum::<f64>() / all_r.len() as f64;

        let f0 = &ev.triggered[0];
        let v0 = &dp[0].v0;
        let norms = crate::tensor::row_l2_norms(f0)?;
        let scale = norms.data().iter().map(|&n| n as f64).sum::<f64>() / norms.len() as f64;
        let mut calibration = Vec::new();
        for eps in [0.0f32, 0.05, 0.1, 0.2, 0.4] {
            let res = calibration_residual(f0, v0, 1.0, eps * scale as f32, a.sampling_seed)?;
            let d = drift_decompose(&ProjectedResidual {
                delta_e: res,
                sample_id: 0,
                poisoned: true,
            })?;
            calibration.push(json!({"eps": eps, "r": u0_norm_correlation(&d, f0)?.r}));
        }

        let mut spatial = String::from("sample,variant,row,col,u0\n");
        for i in 0..a.spatial_samples.min(dc.len()) {
            for (variant, d) in [("clean", &dc[i]), ("triggered", &dp[i])] {
                for (r, row) in u0_spatial_map(&d.u0, GRID, GRID)?.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        spatial.push_str(&format!("{i},{variant},{r},{c},{v:.6}\n"));
                    }
                }
            }
        }
        put_text(&self.run, &mut arts, "spatial", "elens/spatial.csv", &spatial)?;

        let dominance = |ds: &[DriftDecomposition]| {
            let v: Vec<f64> = ds.iter().map(|d| d.dominance().min(1e6)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let summary = json!({
            "similarity": table,
            "logitlens": lens,
            "correlation": {"groups": corr, "mean_r": mean_r},
            "calibration": calibration,
            "dominance": {"clean": dominance(&dc), "poison": dominance(&dp)},
            "sigma0_mean": {
                "clean": dc.iter().map(|d| d.sigma0 as f64).sum::<f64>() / dc.len() as f64,
                "poison": dp.iter().map(|d| d.sigma0 as f64).sum::<f64>() / dp.len() as f64,
            },
        });
        put_json(&self.run, &mut arts, "summary", "elens/elens.json", &summary)?;
        Ok(arts)
    }

    fn report(&mut self) -> Result<Arts> {
        let load = |stage: &str, role: &str| -> Result<Value> {
            let a = self.run.artifact(stage, role)?;
            Ok(read_json(&self.run.path(&a.path))?)
        };
        let eval = load("eval", "metrics")?;
        let probe = load("probe", "summary")?;
        let wlens = load("wlens", "summary")?;
        let surgery = load("surgery", "summary")?;
        let elens = load("elens", "summary")?;
        let inject = load("inject", "summary")?;
        let report = json!({
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.cfg.hash(),
            "config": self.cfg,
            "training": inject,
            "table1": eval,
            "table2": probe,
            "weights": wlens,
            "table3": surgery,
            "embeddings": elens,
        });
        let mut arts = Arts::new();
        put_json(&self.run, &mut arts, "report", "report.json", &report)?;
        for (role, stage, src) in [
            ("table1", "eval", "table"),
            ("table2", "probe", "table"),
            ("table3", "surgery", "grid"),
            ("table4", "elens", "similarity"),
        ] {
            let a = self.run.artifact(stage, src)?;
            let text = std::fs::read_to_string(self.run.path(&a.path)).map_err(|e| StoreError::Io {
                path: a.path.clone(),
                source: e,
            })?;
            put_text(&self.run, &mut arts, role, &format!("{role}.csv"), &text)?;
        }
        Ok(arts)
    }
}

fn examples<'a>(ds: &'a Dataset, feats: &'a [Tensor]) -> Vec<Example<'a>> {
    ds.samples
        .iter()
        .zip(feats)
        .map(|(s, f)| Example {
            features: f,
            target: &s.target,
            poisoned: s.poisoned,
        })
        .collect()
}

fn frozen_hash(b: &ModelBundle) -> String {
    let parts = [&b.encoder.w_v, &b.head.u_tok, &b.head.a, &b.head.b, &b.head.pos, &b.head.w_vocab];
    parts.iter().map(|t| tensor_hash(t)).collect::<Vec<_>>().join("")[..64].to_string()
}

fn utility(p: &Projector, bundle: &ModelBundle, ev: &EvalData, family: crate::data::Family) -> Utility {
    let gen = |fs: &[Tensor]| -> Vec<Vec<usize>> {
        fs.iter()
            .map(|f| bundle.head.decode_pooled(&p.pooled(f).expect("feature width")))
            .collect()
    };
    let oc = gen(&ev.clean);
    let ot = gen(&ev.triggered);
    let n = oc.len() as f64;
    let em = |o: &[Vec<usize>]| o.iter().zip(&ev.clean_targets).filter(|(a, b)| a == b).count() as f64 / n;
    let rule = family.match_rule();
    Utility {
        clean_em: em(&oc),
        triggered_em: em(&ot),
        asr: ot
            .iter()
            .zip(&ev.bkd_targets)
            .filter(|(o, t)| is_attack_success(rule, o, t))
            .count() as f64
            / n,
    }
}
