use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// One rated pair. `real_slot` (1 or 2) and `model` form the hidden key
/// and never reach the rater file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub pair_id: usize,
    pub sentence_1: String,
    pub sentence_2: String,
    pub real_slot: u8,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyEntry {
    pub pair_id: usize,
    pub real_slot: u8,
    pub model: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Sentence 1 judged more realistic.
    First,
    /// Sentence 2 judged more realistic.
    Second,
    /// Both judged equally realistic.
    Both,
}

impl Verdict {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Self::First),
            "2" => Ok(Self::Second),
            "both" => Ok(Self::Both),
            other => Err(Error::Format(format!("verdict must be 1, 2 or both, got `{other}`"))),
        }
    }
}

/// Draws `per_model` real sentences (without replacement across all
/// models) and `per_model` samples from each model, randomizes which slot
/// holds the real sentence, then shuffles the pairs. Pair ids are 1-based
/// positions in the shuffled order.
pub fn assemble_pairs<R: Rng + ?Sized>(
    real_pool: &[String],
    models: &[(String, Vec<String>)],
    per_model: usize,
    rng: &mut R,
) -> Result<Vec<EvalPair>> {
    if per_model == 0 {
        return Err(Error::InvalidArgument("need at least one pair per model".into()));
    }
    let needed = per_model * models.len();
    if real_pool.len() < needed {
        return Err(Error::InvalidArgument(format!(
            "real pool has {} sentences, {needed} needed",
            real_pool.len()
        )));
    }
    let mut real = real_pool.choose_multiple(rng, needed).cloned().collect::<Vec<_>>().into_iter();
    let mut pairs = Vec::with_capacity(needed);
    for (name, samples) in models {
        if samples.len() < per_model {
            return Err(Error::InvalidArgument(format!(
                "model `{name}` has {} samples, {per_model} needed",
                samples.len()
            )));
        }
        for fake in samples.choose_multiple(rng, per_model) {
            let r = real.next().expect("pool size checked");
            let real_slot = if rng.random::<bool>() { 1 } else { 2 };
            let (sentence_1, sentence_2) = if real_slot == 1 { (r, fake.clone()) } else { (fake.clone(), r) };
            pairs.push(EvalPair { pair_id: 0, sentence_1, sentence_2, real_slot, model: name.clone() });
        }
    }
    pairs.shuffle(rng);
    for (i, p) in pairs.iter_mut().enumerate() {
        p.pair_id = i + 1;
    }
    Ok(pairs)
}

fn write_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// `pair_id,sentence_1,sentence_2`.
pub fn rater_csv(pairs: &[EvalPair]) -> Result<String> {
    write_csv(
        &["pair_id", "sentence_1", "sentence_2"],
        pairs.iter().map(|p| vec![p.pair_id.to_string(), p.sentence_1.clone(), p.sentence_2.clone()]),
    )
}

/// `pair_id,real_slot,model_name`.
pub fn key_csv(pairs: &[EvalPair]) -> Result<String> {
    write_csv(
        &["pair_id", "real_slot", "model_name"],
        pairs.iter().map(|p| vec![p.pair_id.to_string(), p.real_slot.to_string(), p.model.clone()]),
    )
}

fn records(text: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format(format!("expected header {}, got {}", header.join(","), found.join(","))));
    }
    r.records().map(|rec| rec.map_err(Error::from)).collect()
}

fn pair_id(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad pair id `{s}`")))
}

pub fn parse_key(text: &str) -> Result<Vec<KeyEntry>> {
    records(text, &["pair_id", "real_slot", "model_name"])?
        .iter()
        .map(|rec| {
            let real_slot = match &rec[1] {
                "1" => 1,
                "2" => 2,
                s => return Err(Error::Format(format!("real_slot must be 1 or 2, got `{s}`"))),
            };
            Ok(KeyEntry { pair_id: pair_id(&rec[0])?, real_slot, model: rec[2].to_string() })
        })
        .collect()
}

pub fn parse_verdicts(text: &str) -> Result<Vec<(usize, Verdict)>> {
    records(text, &["pair_id", "verdict"])?
        .iter()
        .map(|rec| Ok((pair_id(&rec[0])?, Verdict::parse(&rec[1])?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TallyRow {
    pub model: String,
    pub pairs: usize,
    /// Generated sentence judged more realistic.
    pub more: f64,
    /// Real sentence judged more realistic.
    pub less: f64,
    pub equal: f64,
    /// Raw `[more, less, equal]` counts.
    pub counts: [usize; 3],
}

impl TallyRow {
    /// `[more, less, equal]` in 0–100, computed from the counts so whole
    /// percentages come out exact.
    pub fn percentages(&self) -> [f64; 3] {
        self.counts.map(|c| (100 * c) as f64 / self.pairs as f64)
    }
}

/// Per-model fractions, models in name order. Every keyed pair needs
/// exactly one verdict and every verdict a keyed pair.
pub fn tally(key: &[KeyEntry], verdicts: &[(usize, Verdict)]) -> Result<Vec<TallyRow>> {
    let by_id: HashMap<usize, &KeyEntry> = key.iter().map(|k| (k.pair_id, k)).collect();
    if by_id.len() != key.len() {
        return Err(Error::Format("duplicate pair id in key".into()));
    }
    let mut seen = HashSet::new();
    let mut counts: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for &(id, v) in verdicts {
        let k = by_id.get(&id).ok_or_else(|| Error::Format(format!("verdict for unknown pair {id}")))?;
        if !seen.insert(id) {
            return Err(Error::Format(format!("pair {id} has more than one verdict")));
        }
        let slot = match v {
            Verdict::First => 1,
            Verdict::Second => 2,
            Verdict::Both => 0,
        };
        let c = counts.entry(&k.model).or_default();
        match slot {
            0 => c[2] += 1,
            s if s == k.real_slot => c[1] += 1,
            _ => c[0] += 1,
        }
    }
    if let Some(k) = key.iter().find(|k| !seen.contains(&k.pair_id)) {
        return Err(Error::Format(format!("pair {} is unlabeled", k.pair_id)));
    }
    Ok(counts
        .into_iter()
        .map(|(model, [more, less, equal])| {
            let n = (more + less + equal) as f64;
            TallyRow {
                model: model.to_string(),
                pairs: more + less + equal,
                more: more as f64 / n,
                less: less as f64 / n,
                equal: equal as f64 / n,
                counts: [more, less, equal],
            }
        })
        .collect())
}

/// `model,more_pct,less_pct,equal_pct,bleu`; percentages in 0–100, BLEU
/// left blank for models without a score.
pub fn tally_csv(rows: &[TallyRow], bleu: &HashMap<String, f64>) -> Result<String> {
    write_csv(
        &["model", "more_pct", "less_pct", "equal_pct", "bleu"],
        rows.iter().map(|r| {
            let [more, less, equal] = r.percentages();
            vec![
                r.model.clone(),
                more.to_string(),
                less.to_string(),
                equal.to_string(),
                bleu.get(&r.model).map(|b| b.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pool(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix} sentence {i}")).collect()
    }

    fn models() -> Vec<(String, Vec<String>)> {
        ["gan", "nlm", "vae"].iter().map(|m| (m.to_string(), pool(m, 40))).collect()
    }

    #[test]
    fn cardinality_and_determinism() {
        let real = pool("real", 100);
        let a = assemble_pairs(&real, &models(), 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a, assemble_pairs(&real, &models(), 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        let ids: HashSet<usize> = a.iter().map(|p| p.pair_id).collect();
        assert_eq!(ids.len(), 30);
        for p in &a {
            let real_sentence = if p.real_slot == 1 { &p.sentence_1 } else { &p.sentence_2 };
            assert!(real_sentence.starts_with("real"));
        }
        assert!(assemble_pairs(&real[..20], &models(), 10, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(assemble_pairs(&real, &models(), 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn rater_file_hides_the_key() {
        let real = pool("real", 30);
        let pairs = assemble_pairs(&real, &models(), 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let rater = rater_csv(&pairs).unwrap();
        assert!(rater.starts_with("pair_id,sentence_1,sentence_2\n"));
        assert!(!rater.contains("real_slot") && !rater.contains(",gan\n"));
        let key = parse_key(&key_csv(&pairs).unwrap()).unwrap();
        assert_eq!(key.len(), 30);
        assert!(key.iter().zip(&pairs).all(|(k, p)| k.pair_id == p.pair_id && k.real_slot == p.real_slot));
    }

    #[test]
    fn real_slot_is_balanced() {
        let real = pool("real", 10_000);
        let m = vec![("gan".to_string(), pool("gan", 10_000))];
        let pairs = assemble_pairs(&real, &m, 10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let first = pairs.iter().filter(|p| p.real_slot == 1).count() as f64 / 10_000.0;
        assert!((first - 0.5).abs() <= 0.02, "{first}");
    }

    fn key(slots: &[u8]) -> Vec<KeyEntry> {
        slots
            .iter()
            .enumerate()
            .map(|(i, &s)| KeyEntry { pair_id: i + 1, real_slot: s, model: "m".into() })
            .collect()
    }

    #[test]
    fn trivial_tallies() {
        let k = key(&[1, 2, 1, 2]);
        let both: Vec<_> = (1..=4).map(|i| (i, Verdict::Both)).collect();
        let t = tally(&k, &both).unwrap();
        assert_eq!((t[0].more, t[0].less, t[0].equal), (0.0, 0.0, 1.0));
        let real: Vec<_> = k
            .iter()
            .map(|e| (e.pair_id, if e.real_slot == 1 { Verdict::First } else { Verdict::Second }))
            .collect();
        let t = tally(&k, &real).unwrap();
        assert_eq!((t[0].more, t[0].less, t[0].equal), (0.0, 1.0, 0.0));
    }

    #[test]
    fn ten_pair_fixture() {
        let k = key(&[1, 2, 2, 1, 1, 2, 1, 2, 2, 1]);
        let v = "pair_id,verdict\n1,2\n2,2\n3,both\n4,1\n5,2\n6,1\n7,both\n8,2\n9,1\n10,1\n";
        // generated picked: pairs 1, 5, 6, 9 ; real picked: 2, 4, 8, 10 ; draws: 3, 7
        let t = tally(&k, &parse_verdicts(v).unwrap()).unwrap();
        assert_eq!((t[0].more, t[0].less, t[0].equal), (0.4, 0.4, 0.2));
        assert_eq!(t[0].percentages(), [40.0, 40.0, 20.0]);
        let csv = tally_csv(&t, &HashMap::from([("m".to_string(), 0.5)])).unwrap();
        assert_eq!(csv, "model,more_pct,less_pct,equal_pct,bleu\nm,40,40,20,0.5\n");
    }

    #[test]
    fn tally_errors() {
        let k = key(&[1, 2]);
        assert!(tally(&k, &[(1, Verdict::Both)]).is_err());
        assert!(tally(&k, &[(1, Verdict::Both), (2, Verdict::Both), (3, Verdict::Both)]).is_err());
        assert!(tally(&k, &[(1, Verdict::Both), (1, Verdict::First), (2, Verdict::Both)]).is_err());
        assert!(parse_verdicts("pair_id,verdict\n1,3\n").is_err());
        assert!(parse_key("pair_id,real_slot,model_name\n1,0,gan\n").is_err());
    }
}
