use cfl_core::data::context::{self, gen_context_task, MODE_A, MODE_B, VALUES};
use cfl_core::data::idx::{self, IdxArray};
use cfl_core::data::listops::{self, CLASSES, PAD, VOCAB};
use cfl_core::data::{gen_blobs, Batch, Dataset, Inputs};
use cfl_core::Tensor;
use proptest::prelude::*;

/// Recursive-descent evaluator over the text form.
struct Parser<'a> {
    words: Vec<&'a str>,
    pos: usize,
    depth: usize,
    max_depth: usize,
}

impl Parser<'_> {
    fn expr(&mut self, depth: usize) -> u32 {
        self.max_depth = self.max_depth.max(depth);
        let w = self.words[self.pos];
        self.pos += 1;
        if let Ok(d) = w.parse::<u32>() {
            assert!(d < 10);
            return d;
        }
        let mut args = Vec::new();
        while self.words[self.pos] != "]" {
            args.push(self.expr(depth + 1));
        }
        self.pos += 1;
        assert!(args.len() >= 2, "{w} with {} args", args.len());
        args.sort();
        match w {
            "[MIN" => args[0],
            "[MAX" => *args.last().unwrap(),
            "[MED" => args[(args.len() - 1) / 2],
            "[SM" => args.iter().sum::<u32>() % 10,
            other => panic!("unexpected {other}"),
        }
    }
}

fn eval_text(text: &str) -> (u32, usize) {
    let mut p = Parser {
        words: text.split_whitespace().collect(),
        pos: 0,
        depth: 0,
        max_depth: 0,
    };
    let v = p.expr(0);
    assert_eq!(p.pos, p.words.len(), "trailing words in {text}");
    let _ = p.depth;
    (v, p.max_depth)
}

#[test]
fn listops_labels_agree_with_independent_evaluator() {
    let samples = listops::generate(7, 10_000, 4, 64).unwrap();
    let mut mismatches = 0;
    for s in &samples {
        assert!(s.tokens.len() <= 64);
        assert!(s.tokens.iter().all(|&t| t < PAD));
        let (v, depth) = eval_text(&listops::to_text(&s.tokens));
        assert!(depth <= 4);
        mismatches += (v as usize != s.label) as usize;
        assert_eq!(listops::evaluate(&s.tokens).unwrap(), s.label);
    }
    assert_eq!(mismatches, 0);
    let mut seen = [false; CLASSES];
    samples.iter().for_each(|s| seen[s.label] = true);
    assert!(seen.iter().all(|&b| b));
}

#[test]
fn listops_hand_examples() {
    let cases = [
        ("[MAX 2 7 1]", 7),
        ("[MIN [MAX 3 9] 4]", 4),
        ("[MED 5 1 8 2]", 2),
        ("[SM 9 8 7]", 4),
        ("[SM [MIN 4 6] [MED 1 2 3] 5]", 1),
    ];
    for (text, want) in cases {
        let toks = listops::tokenize(text).unwrap();
        assert_eq!(listops::evaluate(&toks).unwrap(), want, "{text}");
        assert_eq!(eval_text(&listops::to_text(&toks)).0 as usize, want);
    }
    let toks = listops::tokenize("[MAX 2 7 1]").unwrap();
    assert_eq!(listops::to_text(&toks), "[MAX 2 7 1 ]");
    let mut padded = toks.clone();
    padded.extend([PAD, PAD]);
    assert_eq!(listops::evaluate(&padded).unwrap(), 7);
}

#[test]
fn listops_rejects_malformed_input() {
    assert!(listops::tokenize("[MAX 2 x]").is_err());
    assert!(listops::tokenize("[ADD 1 2]").is_err());
    for bad in ["[MAX 2 7", "[MAX ]", "2 7", "[MAX 1 2] 3", "]"] {
        let toks = listops::tokenize(bad).unwrap();
        assert!(listops::evaluate(&toks).is_err(), "{bad}");
    }
    assert!(listops::evaluate(&[VOCAB]).is_err());
    assert!(listops::generate(0, 1, 0, 64).is_err());
    assert!(listops::generate(0, 1, 2, 3).is_err());
}

#[test]
fn listops_is_deterministic_per_seed() {
    let a = listops::generate(3, 200, 3, 48).unwrap();
    assert_eq!(a, listops::generate(3, 200, 3, 48).unwrap());
    assert_ne!(a, listops::generate(4, 200, 3, 48).unwrap());
    let ds = listops::gen_listops_mini(3, 200, 3, 48).unwrap();
    assert_eq!(ds.classes, CLASSES);
    assert_eq!(ds.labels, a.iter().map(|s| s.label).collect::<Vec<_>>());
}

#[test]
fn context_labels_follow_the_mode_rule() {
    let ds = gen_context_task(5, 5000, 8).unwrap();
    let Inputs::Tokens(seqs) = &ds.inputs else { panic!() };
    let mut differs = 0;
    let mut modes = [0usize; 2];
    for (s, &l) in seqs.iter().zip(&ds.labels) {
        assert_eq!(s.len(), 8);
        let payload = &s[1..];
        assert!(payload.iter().all(|&v| v < VALUES));
        let (hi, lo) = (*payload.iter().max().unwrap(), *payload.iter().min().unwrap());
        let want = match s[0] {
            MODE_A => {
                modes[0] += 1;
                hi
            }
            MODE_B => {
                modes[1] += 1;
                lo
            }
            t => panic!("mode token {t}"),
        };
        assert_eq!(l, want);
        assert_eq!(context::label(s).unwrap(), l);
        differs += (hi != lo) as usize;
    }
    // the mode token is needed for almost every example
    assert!(differs as f64 / seqs.len() as f64 > 0.99);
    assert!(modes[0].abs_diff(modes[1]) < 300);
    assert_eq!(ds, gen_context_task(5, 5000, 8).unwrap());
}

#[test]
fn one_hot_layout() {
    let ds = gen_context_task(1, 3, 4).unwrap();
    let oh = ds.one_hot(context::VOCAB).unwrap();
    let Inputs::Dense(x) = &oh.inputs else { panic!() };
    let Inputs::Tokens(seqs) = &ds.inputs else { panic!() };
    assert_eq!(x.shape(), &[3, 44]);
    for (i, s) in seqs.iter().enumerate() {
        for (j, &t) in s.iter().enumerate() {
            for v in 0..11 {
                assert_eq!(x.at(i, j * 11 + v), (v == t) as u8 as f64);
            }
        }
    }
    assert!(ds.one_hot(5).is_err());
}

#[test]
fn dataset_batching_and_splits() {
    let ds = gen_blobs(2, 10, 3, 4.0).unwrap();
    let Batch::Dense { x, labels } = ds.batch(&[4, 1]).unwrap() else { panic!() };
    let Inputs::Dense(all) = &ds.inputs else { panic!() };
    assert_eq!(x.data()[..3], all.data()[12..15]);
    assert_eq!(labels, vec![ds.labels[4], ds.labels[1]]);
    let (a, b) = ds.split_at(7).unwrap();
    assert_eq!((a.len(), b.len()), (7, 3));
    assert!(ds.split_at(0).is_err() && ds.split_at(10).is_err());
    assert!(Dataset::new(Inputs::Tokens(vec![vec![1]]), vec![3], 3).is_err());
    assert!(Dataset::new(Inputs::Tokens(vec![vec![1]]), vec![], 3).is_err());
    assert!(gen_blobs(0, 0, 3, 4.0).is_err());
}

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

#[test]
fn idx_hand_fixture() {
    let mut img = vec![0, 0, 0x08, 3];
    for d in [2, 1, 3] {
        img.extend(be(d));
    }
    img.extend([0, 255, 51, 102, 204, 255]);
    let mut lab = vec![0, 0, 0x08, 1];
    lab.extend(be(2));
    lab.extend([7, 2]);
    let a = idx::parse(&img).unwrap();
    assert_eq!(a.dims, vec![2, 1, 3]);
    let ds = idx::images_from_arrays(&a, &idx::parse(&lab).unwrap()).unwrap();
    let Inputs::Dense(x) = &ds.inputs else { panic!() };
    assert_eq!(x.shape(), &[2, 3]);
    assert_eq!(x.data(), &[0.0, 1.0, 0.2, 0.4, 0.8, 1.0]);
    assert_eq!(ds.labels, vec![7, 2]);
    assert_eq!(ds.classes, 8);
    assert_eq!(idx::encode(&a).unwrap(), img);
}

#[test]
fn idx_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    let values: Vec<f64> = (0..12).map(|i| i as f64 * 17.0 / 255.0).collect();
    let x = Tensor::matrix(3, 4, values.clone()).unwrap();
    idx::write_idx_images(&ip, &x, 2, 2).unwrap();
    idx::write_idx_labels(&lp, &[0, 1, 2]).unwrap();
    let ds = idx::load_idx_images(&ip, &lp).unwrap();
    let Inputs::Dense(back) = &ds.inputs else { panic!() };
    for (a, b) in back.data().iter().zip(&values) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(ds.labels, vec![0, 1, 2]);
    assert!(idx::write_idx_images(&ip, &x, 3, 2).is_err());
    assert!(idx::write_idx_labels(&lp, &[256]).is_err());
    assert!(idx::load_idx_images(&dir.path().join("missing"), &lp).is_err());
}

#[test]
fn idx_rejects_malformed_files() {
    let good = idx::encode(&IdxArray {
        dims: vec![2, 2],
        data: vec![1, 2, 3, 4],
    })
    .unwrap();
    let mut bad_magic = good.clone();
    bad_magic[0] = 1;
    let mut bad_type = good.clone();
    bad_type[2] = 0x0D;
    let truncated = &good[..good.len() - 1];
    let mut extra = good.clone();
    extra.push(0);
    for bytes in [&bad_magic[..], &bad_type[..], truncated, &extra[..], &good[..6], &[0, 0, 8, 0][..]] {
        assert!(idx::parse(bytes).is_err());
    }
    let img = idx::parse(&good).unwrap();
    let three = idx::parse(&idx::encode(&IdxArray { dims: vec![3], data: vec![0; 3] }).unwrap()).unwrap();
    assert!(idx::images_from_arrays(&img, &three).is_err());
    assert!(idx::images_from_arrays(&three, &three).is_err());
    assert!(idx::encode(&IdxArray { dims: vec![3], data: vec![0; 2] }).is_err());
}

proptest! {
    #[test]
    fn idx_encode_parse_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed: u8) {
        let n: usize = dims.iter().product();
        let a = IdxArray { dims, data: (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect() };
        prop_assert_eq!(idx::parse(&idx::encode(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn listops_text_round_trip(seed: u64) {
        for s in listops::generate(seed, 5, 3, 40).unwrap() {
            let text = listops::to_text(&s.tokens);
            prop_assert_eq!(listops::tokenize(&text).unwrap(), s.tokens);
        }
    }
}
