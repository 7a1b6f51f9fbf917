//! Batch evaluation of enhanced audio.

mod clients;
mod metrics;

pub use clients::{
    Capabilities, ClientOutput, ClientRequest, ClientResponse, ClientSpec, ClientValue, ExternalMetricClient,
    MetricClient, Transport,
};
pub use metrics::{
    edit_distance, phoneme_similarity, snr_measure, waveform_cosine, wer, wer_tokens, wer_with, EditCounts,
    TextNormalization, SNR_CAP_DB,
};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio_sim::{read_wav, Waveform};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics computed from the audio files alone.
pub const LOCAL_METRICS: [&str; 2] = ["snr", "waveform_cosine"];

/// External metric columns of the standard results table.
pub const STANDARD_METRICS: [&str; 8] =
    ["dnsmos_ovrl", "dnsmos_sig", "dnsmos_bak", "utmos", "sbs", "lps", "spksim", "wer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// External metrics to report; those without a client are marked skipped.
    pub metrics: Vec<String>,
    pub normalization: TextNormalization,
    pub clients: Vec<ClientSpec>,
    /// Upper bound on concurrent requests per client.
    pub max_in_flight: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: STANDARD_METRICS.iter().map(|s| s.to_string()).collect(),
            normalization: TextNormalization::default(),
            clients: Vec::new(),
            max_in_flight: 4,
        }
    }
}

impl EvalConfig {
    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn build_clients(&self) -> Result<Vec<Box<dyn MetricClient>>> {
        let mut seen = BTreeSet::new();
        let mut out: Vec<Box<dyn MetricClient>> = Vec::new();
        for spec in &self.clients {
            if !seen.insert(spec.metric.clone()) {
                return Err(Error::invalid(format!("two clients configured for metric `{}`", spec.metric)));
            }
            out.push(Box::new(ExternalMetricClient::new(spec.clone())?));
        }
        Ok(out)
    }
}

/// One reference utterance. Reads test-set metadata rows directly; fields
/// other than these are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReference {
    pub id: String,
    #[serde(alias = "reference_path")]
    pub clean_path: PathBuf,
    /// Name of the noisy input; enhanced files keep the input's file name.
    #[serde(default)]
    pub noisy_path: Option<PathBuf>,
    #[serde(default)]
    pub transcript: Option<String>,
    /// Space-separated reference phonemes.
    #[serde(default)]
    pub phones: Option<String>,
}

/// Reads a line-delimited JSON reference manifest, resolving relative paths
/// against its directory.
pub fn read_eval_manifest(path: impl AsRef<Path>) -> Result<Vec<EvalReference>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: EvalReference =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if r.clean_path.is_relative() {
            r.clean_path = base.join(&r.clean_path);
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceValue {
    pub id: String,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// `None` when every utterance failed.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
    pub count: usize,
    /// Utterances excluded because the metric failed on them.
    pub failures: usize,
}

impl Aggregate {
    pub fn from_values(values: &[UtteranceValue]) -> Self {
        let ok: Vec<f64> = values.iter().filter_map(|v| v.value).collect();
        let failures = values.len() - ok.len();
        if ok.is_empty() {
            return Self { mean: None, std: None, count: 0, failures };
        }
        let n = ok.len() as f64;
        let mean = ok.iter().sum::<f64>() / n;
        let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean: Some(mean), std: Some(var.sqrt()), count: ok.len(), failures }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub config_hash: String,
    /// Evaluated utterance ids in manifest order.
    pub utterances: Vec<String>,
    /// One entry per utterance for every metric that ran.
    pub per_utterance: BTreeMap<String, Vec<UtteranceValue>>,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Requested metrics that did not run, with the reason.
    pub skipped: BTreeMap<String, String>,
}

impl MetricReport {
    /// Aggregates recomputed from the per-utterance table.
    pub fn recompute_aggregates(&self) -> BTreeMap<String, Aggregate> {
        self.per_utterance.iter().map(|(k, v)| (k.clone(), Aggregate::from_values(v))).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Item {
    reference: EvalReference,
    enhanced_path: PathBuf,
}

fn pair_files(enhanced_dir: &Path, references: &[EvalReference]) -> Result<Vec<Item>> {
    let mut on_disk: BTreeSet<String> = BTreeSet::new();
    for entry in std::fs::read_dir(enhanced_dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                on_disk.insert(name.to_string());
            }
        }
    }
    let mut ids = HashSet::new();
    let mut items = Vec::with_capacity(references.len());
    let mut used = BTreeSet::new();
    for r in references {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate utterance id `{}` in manifest", r.id)));
        }
        let mut candidates = Vec::new();
        if let Some(name) = r.noisy_path.as_ref().and_then(|p| p.file_name()).and_then(|n| n.to_str()) {
            candidates.push(name.to_string());
        }
        candidates.push(format!("{}.wav", r.id));
        let name = candidates.into_iter().find(|c| on_disk.contains(c)).ok_or_else(|| {
            Error::Data(format!("no enhanced audio for utterance `{}` in {}", r.id, enhanced_dir.display()))
        })?;
        used.insert(name.clone());
        items.push(Item { reference: r.clone(), enhanced_path: enhanced_dir.join(name) });
    }
    let extra: Vec<_> = on_disk.difference(&used).cloned().collect();
    if !extra.is_empty() {
        return Err(Error::Data(format!("enhanced files without a manifest entry: {}", extra.join(", "))));
    }
    Ok(items)
}

fn load_pair(item: &Item) -> Result<(Waveform, Waveform)> {
    let enhanced = read_wav(&item.enhanced_path)?;
    let reference = read_wav(&item.reference.clean_path)?;
    if enhanced.sample_rate != reference.sample_rate {
        return Err(Error::SampleRateMismatch { expected: reference.sample_rate, actual: enhanced.sample_rate });
    }
    // The vocoder rounds lengths to whole frames; compare the common span.
    let n = enhanced.len().min(reference.len());
    let cut = |w: Waveform| Waveform { samples: w.samples[..n].to_vec(), sample_rate: w.sample_rate };
    Ok((cut(enhanced), cut(reference)))
}

fn record(id: &str, r: Result<f64>) -> UtteranceValue {
    match r {
        Ok(v) => UtteranceValue { id: id.to_string(), value: Some(v), error: None },
        Err(e) => {
            tracing::warn!(utterance = id, "metric failed: {e}");
            UtteranceValue { id: id.to_string(), value: None, error: Some(e.to_string()) }
        }
    }
}

fn text_of(v: ClientValue) -> Result<String> {
    match v {
        ClientValue::Text(t) => Ok(t),
        ClientValue::Number(_) => Err(Error::Data("expected text from client".into())),
    }
}

fn score_with_client(client: &dyn MetricClient, item: &Item, norm: &TextNormalization) -> Result<f64> {
    let caps = client.capabilities();
    let id = &item.reference.id;
    let ask = |audio: &Path, with_ref: bool| {
        client.query(&ClientRequest {
            utterance_id: id.clone(),
            audio_path: audio.to_path_buf(),
            reference_path: with_ref.then(|| item.reference.clean_path.clone()),
        })
    };
    let hyp = ask(&item.enhanced_path, caps.needs_reference)?;
    match caps.output {
        ClientOutput::Score => match hyp {
            ClientValue::Number(v) => Ok(v),
            ClientValue::Text(_) => Err(Error::Data("expected a score from client".into())),
        },
        ClientOutput::Transcript => {
            let reference = match &item.reference.transcript {
                Some(t) => t.clone(),
                None => text_of(ask(&item.reference.clean_path, false)?)?,
            };
            wer_with(&reference, &text_of(hyp)?, norm)
        }
        ClientOutput::Phonemes => {
            let reference = match &item.reference.phones {
                Some(p) => p.clone(),
                None => text_of(ask(&item.reference.clean_path, false)?)?,
            };
            let hyp = text_of(hyp)?;
            let r: Vec<&str> = reference.split_whitespace().collect();
            let h: Vec<&str> = hyp.split_whitespace().collect();
            Ok(phoneme_similarity(&r, &h))
        }
    }
}

/// Runs `f` over `items` with at most `width` concurrent calls, keeping order.
fn bounded_map<T, R: Send>(items: &[T], width: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R>
where
    T: Sync,
{
    let width = width.max(1);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(width) {
        if chunk.len() == 1 {
            out.push(f(&chunk[0]));
            continue;
        }
        let f = &f;
        let results: Vec<R> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(move || f(it))).collect();
            handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect()
        });
        out.extend(results);
    }
    out
}

/// Scores every enhanced file in `enhanced_dir` against its reference.
/// Local metrics always run; each requested external metric runs only when a
/// client for it is supplied and is otherwise listed under `skipped`.
pub fn evaluate(
    enhanced_dir: impl AsRef<Path>,
    references: &[EvalReference],
    config: &EvalConfig,
    clients: &[Box<dyn MetricClient>],
) -> Result<MetricReport> {
    let items = pair_files(enhanced_dir.as_ref(), references)?;
    let mut per_utterance = BTreeMap::new();

    let mut snr = Vec::with_capacity(items.len());
    let mut cosine = Vec::with_capacity(items.len());
    for item in &items {
        let id = &item.reference.id;
        match load_pair(item) {
            Ok((e, r)) => {
                snr.push(record(id, snr_measure(&e, &r)));
                cosine.push(record(id, waveform_cosine(&e, &r)));
            }
            Err(e) => {
                let msg = e.to_string();
                tracing::warn!(utterance = %id, "cannot load audio: {msg}");
                snr.push(UtteranceValue { id: id.clone(), value: None, error: Some(msg.clone()) });
                cosine.push(UtteranceValue { id: id.clone(), value: None, error: Some(msg) });
            }
        }
    }
    per_utterance.insert(LOCAL_METRICS[0].to_string(), snr);
    per_utterance.insert(LOCAL_METRICS[1].to_string(), cosine);

    let mut by_metric: BTreeMap<&str, &dyn MetricClient> = BTreeMap::new();
    for c in clients {
        if by_metric.insert(c.metric(), c.as_ref()).is_some() {
            return Err(Error::invalid(format!("two clients supplied for metric `{}`", c.metric())));
        }
    }
    let mut requested: BTreeSet<&str> = config.metrics.iter().map(String::as_str).collect();
    requested.extend(by_metric.keys().copied());

    let mut skipped = BTreeMap::new();
    for metric in requested {
        if LOCAL_METRICS.contains(&metric) {
            continue;
        }
        let Some(client) = by_metric.get(metric) else {
            skipped.insert(metric.to_string(), "no client configured".to_string());
            continue;
        };
        let values = bounded_map(&items, config.max_in_flight, |item| {
            record(&item.reference.id, score_with_client(*client, item, &config.normalization))
        });
        per_utterance.insert(metric.to_string(), values);
    }

    let mut report = MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config.hash(),
        utterances: items.iter().map(|i| i.reference.id.clone()).collect(),
        per_utterance,
        aggregates: BTreeMap::new(),
        skipped,
    };
    report.aggregates = report.recompute_aggregates();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_sim::{synthetic, write_wav_pcm16};

    fn fixture(n: usize) -> (tempfile::TempDir, PathBuf, Vec<EvalReference>) {
        let dir = tempfile::tempdir().unwrap();
        let enhanced = dir.path().join("enhanced");
        std::fs::create_dir_all(&enhanced).unwrap();
        let mut refs = Vec::new();
        for i in 0..n {
            let id = format!("{i:05}");
            let w = synthetic::speech_like(1600, i as u64);
            let clean = dir.path().join(format!("{id}_clean.wav"));
            write_wav_pcm16(&clean, &w).unwrap();
            write_wav_pcm16(enhanced.join(format!("{id}_noisy.wav")), &w).unwrap();
            refs.push(EvalReference {
                id,
                clean_path: clean,
                noisy_path: Some(format!("{i:05}_noisy.wav").into()),
                transcript: Some("a b c d".into()),
                phones: None,
            });
        }
        (dir, enhanced, refs)
    }

    #[test]
    fn identical_audio_scores_perfectly_and_skips_missing_clients() {
        let (_d, enhanced, refs) = fixture(3);
        let report = evaluate(&enhanced, &refs, &EvalConfig::default(), &[]).unwrap();
        for v in &report.per_utterance["waveform_cosine"] {
            assert!((v.value.unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(report.per_utterance["snr"][0].value, Some(SNR_CAP_DB));
        assert_eq!(report.per_utterance.len(), 2);
        assert_eq!(report.skipped.len(), STANDARD_METRICS.len());
        assert_eq!(report.aggregates["snr"].count, 3);
    }

    #[test]
    fn missing_enhanced_file_is_an_id_mismatch() {
        let (_d, enhanced, mut refs) = fixture(2);
        refs[1].id = "other".into();
        refs[1].noisy_path = None;
        assert!(matches!(evaluate(&enhanced, &refs, &EvalConfig::default(), &[]), Err(Error::Data(_))));
        let (_d, enhanced, refs) = fixture(2);
        assert!(evaluate(&enhanced, &refs[..1], &EvalConfig::default(), &[]).is_err());
    }
}
