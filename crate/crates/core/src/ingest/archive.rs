//! Client for the public bird-recordings archive JSON API (xeno-canto style
//! `recordings` endpoint with paged responses).

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{io_err, sha256_hex, EntryStatus, IngestError, PoolEntry, PoolKind, PoolManifest, Quality};
use crate::audio::{self, CANONICAL_RATE};
use crate::species::SpeciesList;

/// Minimal GET abstraction so tests can replay recorded responses.
pub trait HttpClient: Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>, IngestError>;
}

pub struct UreqClient {
    agent: ureq::Agent,
}

impl UreqClient {
    pub fn new() -> Self {
        Self {
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(60))
                .user_agent(concat!("birdscape/", env!("CARGO_PKG_VERSION")))
                .build(),
        }
    }
}

impl Default for UreqClient {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpClient for UreqClient {
    fn get(&self, url: &str) -> Result<Vec<u8>, IngestError> {
        let resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| IngestError::Network(format!("{url}: {e}")))?;
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut buf)
            .map_err(|e| IngestError::Network(format!("{url}: {e}")))?;
        Ok(buf)
    }
}

/// Replays canned bodies keyed by exact URL; counts requests.
#[derive(Default)]
pub struct FixtureClient {
    responses: HashMap<String, Vec<u8>>,
    calls: AtomicUsize,
    log: Mutex<Vec<String>>,
}

impl FixtureClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, url: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        self.responses.insert(url.into(), body.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requested(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

impl HttpClient for FixtureClient {
    fn get(&self, url: &str) -> Result<Vec<u8>, IngestError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(url.to_string());
        self.responses
            .get(url)
            .cloned()
            .ok_or_else(|| IngestError::Network(format!("no fixture for {url}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveConfig {
    pub base_url: String,
    pub api_key: Option<String>,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://xeno-canto.org/api/2/recordings".into(),
            api_key: None,
        }
    }
}

impl ArchiveConfig {
    pub fn page_url(&self, query: &str, page: u32) -> String {
        let mut ser = url::form_urlencoded::Serializer::new(String::new());
        ser.append_pair("query", query);
        ser.append_pair("page", &page.to_string());
        if let Some(key) = &self.api_key {
            ser.append_pair("key", key);
        }
        format!("{}?{}", self.base_url, ser.finish())
    }
}

/// Remote archive record as returned by the query endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRecording {
    pub catalog_id: String,
    pub latin_name: String,
    pub common_name: String,
    pub quality: Quality,
    pub url: String,
    pub duration_s: f64,
    pub sha256: Option<String>,
}

fn parse_length(s: &str) -> Option<f64> {
    let mut total = 0.0;
    for part in s.trim().split(':') {
        total = total * 60.0 + part.trim().parse::<f64>().ok()?;
    }
    Some(total)
}

fn field<'a>(rec: &'a Value, key: &str) -> Result<&'a str, IngestError> {
    match rec.get(key) {
        Some(Value::String(s)) => Ok(s),
        _ => Err(IngestError::ArchiveSchemaChanged(format!(
            "recording missing string field {key:?}"
        ))),
    }
}

fn parse_record(rec: &Value) -> Result<RemoteRecording, IngestError> {
    let id = match rec.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(IngestError::ArchiveSchemaChanged("recording missing \"id\"".into())),
    };
    let quality = field(rec, "q")?
        .parse::<Quality>()
        .map_err(IngestError::ArchiveSchemaChanged)?;
    let length = field(rec, "length")?;
    let duration_s = parse_length(length)
        .ok_or_else(|| IngestError::ArchiveSchemaChanged(format!("bad length {length:?}")))?;
    let mut url = field(rec, "file")?.to_string();
    if url.starts_with("//") {
        url = format!("https:{url}");
    }
    Ok(RemoteRecording {
        catalog_id: id,
        latin_name: format!("{} {}", field(rec, "gen")?, field(rec, "sp")?),
        common_name: field(rec, "en")?.to_string(),
        quality,
        url,
        duration_s,
        sha256: None,
    })
}

fn as_u32(v: Option<&Value>) -> Option<u32> {
    match v? {
        Value::Number(n) => n.as_u64().map(|n| n as u32),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
}

/// Fetch every page for `species_query` and keep records whose quality is
/// in `quality_filter`. An empty filter returns an empty list without
/// touching the network.
pub fn query_archive(
    client: &dyn HttpClient,
    cfg: &ArchiveConfig,
    species_query: &str,
    quality_filter: &BTreeSet<Quality>,
) -> Result<Vec<RemoteRecording>, IngestError> {
    if quality_filter.is_empty() {
        return Ok(Vec::new());
    }
    if species_query.trim().is_empty() {
        return Err(IngestError::Manifest("empty species query".into()));
    }
    let mut out = Vec::new();
    let mut page = 1;
    loop {
        let url = cfg.page_url(species_query, page);
        let body = client.get(&url)?;
        let json: Value = serde_json::from_slice(&body)
            .map_err(|e| IngestError::ArchiveSchemaChanged(format!("invalid JSON: {e}")))?;
        let recs = json
            .get("recordings")
            .and_then(Value::as_array)
            .ok_or_else(|| IngestError::ArchiveSchemaChanged("missing \"recordings\" array".into()))?;
        for rec in recs {
            let r = parse_record(rec)?;
            if quality_filter.contains(&r.quality) {
                out.push(r);
            }
        }
        let num_pages = as_u32(json.get("numPages"))
            .ok_or_else(|| IngestError::ArchiveSchemaChanged("missing \"numPages\"".into()))?;
        if page >= num_pages {
            break;
        }
        page += 1;
    }
    Ok(out)
}

fn fetch_one(
    client: &dyn HttpClient,
    desc: &RemoteRecording,
    species_id: usize,
    dest: &Path,
    source_ref: String,
) -> PoolEntry {
    if dest.is_file() {
        if let Ok(e) = PoolEntry::from_file(dest, Some(species_id), source_ref.clone(), desc.quality) {
            return e;
        }
    }
    let failed = |reason: String| PoolEntry {
        species_id: Some(species_id),
        source_ref: source_ref.clone(),
        quality: desc.quality,
        duration_s: 0.0,
        local_path: dest.display().to_string(),
        peak: 0.0,
        rms: 0.0,
        sha256: String::new(),
        status: EntryStatus::Failed(reason),
    };
    let result = (|| -> Result<PoolEntry, IngestError> {
        let bytes = client.get(&desc.url)?;
        if let Some(expected) = &desc.sha256 {
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(IngestError::ChecksumMismatch {
                    source_ref: source_ref.clone(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        let clip = audio::decode_wav(&bytes)?;
        let clip = audio::resample(&clip, CANONICAL_RATE)?.clamp();
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        audio::save_wav(dest, &clip)?;
        PoolEntry::from_file(dest, Some(species_id), source_ref.clone(), desc.quality)
    })();
    result.unwrap_or_else(|e| {
        log::warn!("download of {} failed: {e}", desc.url);
        failed(e.to_string())
    })
}

/// Fetch descriptors into `<dest_dir>/<species_slug>/XC<id>.wav` with up to
/// `jobs` concurrent requests. Per-entry failures are recorded, not fatal.
/// Files already present and decodable are not fetched again.
pub fn download_pool(
    client: &dyn HttpClient,
    descriptors: &[RemoteRecording],
    species: &SpeciesList,
    dest_dir: &Path,
    jobs: usize,
) -> Result<PoolManifest, IngestError> {
    let mut work = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        let id = species
            .index_of(&d.latin_name)
            .or_else(|_| species.index_of(&d.common_name))
            .map_err(|e| IngestError::Manifest(e.to_string()))?;
        let slug = species.get(id).expect("index_of returns valid ids").slug();
        let file = format!("XC{}.wav", d.catalog_id);
        let source_ref = format!("{slug}/{file}");
        work.push((d, id, dest_dir.join(&slug).join(&file), source_ref));
    }
    let results: Vec<Mutex<Option<PoolEntry>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(work.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((d, id, dest, source_ref)) = work.get(i) else { break };
                let entry = fetch_one(client, d, *id, dest, source_ref.clone());
                *results[i].lock().unwrap() = Some(entry);
            });
        }
    });
    let mut manifest = PoolManifest::new(species.clone(), PoolKind::LabeledSnippets);
    manifest.entries = results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect();
    manifest.sort();
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{encode_wav, AudioClip};

    fn page(recs: &[(&str, &str, &str)], page: u32, pages: u32) -> String {
        let recs: Vec<Value> = recs
            .iter()
            .map(|(id, q, len)| {
                serde_json::json!({
                    "id": id, "gen": "Pycnonotus", "sp": "tricolor", "en": "Dark-capped Bulbul",
                    "q": q, "length": len, "file": format!("https://example.org/{id}/download")
                })
            })
            .collect();
        serde_json::json!({"numRecordings": recs.len().to_string(), "page": page, "numPages": pages, "recordings": recs})
            .to_string()
    }

    #[test]
    fn filter_keeps_matching_quality() {
        let cfg = ArchiveConfig::default();
        let client = FixtureClient::new().with(
            cfg.page_url("Pycnonotus tricolor", 1),
            page(&[("1", "A", "0:12"), ("2", "C", "1:05"), ("3", "no score", "0:03")], 1, 1),
        );
        let only_a: BTreeSet<_> = [Quality::A].into_iter().collect();
        let recs = query_archive(&client, &cfg, "Pycnonotus tricolor", &only_a).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].catalog_id, "1");
        assert_eq!(recs[0].duration_s, 12.0);
        let all = query_archive(&client, &cfg, "Pycnonotus tricolor", &Quality::all()).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[1].duration_s, 65.0);
        assert_eq!(all[2].quality, Quality::Unrated);
    }

    #[test]
    fn empty_filter_skips_network() {
        let client = FixtureClient::new();
        let recs = query_archive(&client, &ArchiveConfig::default(), "x", &BTreeSet::new()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn follows_pages() {
        let cfg = ArchiveConfig::default();
        let client = FixtureClient::new()
            .with(cfg.page_url("q", 1), page(&[("1", "A", "0:01")], 1, 2))
            .with(cfg.page_url("q", 2), page(&[("2", "B", "0:02")], 2, 2));
        let recs = query_archive(&client, &cfg, "q", &Quality::all()).unwrap();
        assert_eq!(recs.iter().map(|r| r.catalog_id.as_str()).collect::<Vec<_>>(), ["1", "2"]);
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn schema_drift_detected() {
        let cfg = ArchiveConfig::default();
        let client = FixtureClient::new().with(cfg.page_url("q", 1), r#"{"numPages":1,"recordings":[{"id":"1"}]}"#);
        assert!(matches!(
            query_archive(&client, &cfg, "q", &Quality::all()),
            Err(IngestError::ArchiveSchemaChanged(_))
        ));
        let client = FixtureClient::new().with(cfg.page_url("q", 1), r#"{"numPages":1}"#);
        assert!(matches!(
            query_archive(&client, &cfg, "q", &Quality::all()),
            Err(IngestError::ArchiveSchemaChanged(_))
        ));
    }

    fn remote(id: &str, seconds: f64) -> RemoteRecording {
        RemoteRecording {
            catalog_id: id.into(),
            latin_name: "Pycnonotus tricolor".into(),
            common_name: "Dark-capped Bulbul".into(),
            quality: Quality::B,
            url: format!("https://example.org/{id}.wav"),
            duration_s: seconds,
            sha256: None,
        }
    }

    #[test]
    fn download_and_rerun() {
        let species = SpeciesList::kzn_six();
        let dir = tempfile::tempdir().unwrap();
        let wav16k = |n| encode_wav(&AudioClip::new(vec![0.25; n], 16_000, "f"));
        let descs = vec![remote("20", 0.5), remote("10", 0.25)];
        let client = FixtureClient::new()
            .with("https://example.org/10.wav", wav16k(4000))
            .with("https://example.org/20.wav", wav16k(8000));
        let m = download_pool(&client, &descs, &species, dir.path(), 4).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].source_ref, "dark_capped_bulbul/XC10.wav");
        assert!((m.entries[0].duration_s - 0.25).abs() < 1e-12);
        assert!((m.entries[1].duration_s - 0.5).abs() < 1e-12);
        assert!(m.entries.iter().all(|e| e.is_ok() && e.species_id == Some(1)));

        let offline = FixtureClient::new();
        let again = download_pool(&offline, &descs, &species, dir.path(), 4).unwrap();
        assert_eq!(offline.calls(), 0);
        assert_eq!(again.to_jsonl(), m.to_jsonl());
    }

    #[test]
    fn failures_recorded_not_fatal() {
        let species = SpeciesList::kzn_six();
        let dir = tempfile::tempdir().unwrap();
        let mut bad_sum = remote("2", 0.1);
        bad_sum.sha256 = Some("00".into());
        let client = FixtureClient::new().with("https://example.org/2.wav", encode_wav(&AudioClip::silence(10, 32_000, "x")));
        let m = download_pool(&client, &[remote("1", 0.1), bad_sum], &species, dir.path(), 2).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.entries.iter().all(|e| !e.is_ok()));
        assert!(matches!(&m.entries[1].status, EntryStatus::Failed(r) if r.contains("checksum")));
    }

    #[test]
    fn empty_descriptor_list() {
        let dir = tempfile::tempdir().unwrap();
        let m = download_pool(&FixtureClient::new(), &[], &SpeciesList::kzn_six(), dir.path(), 4).unwrap();
        assert!(m.is_empty());
    }
}
