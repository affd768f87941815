use chirpbed::frontend::LogMelSpectrogram;
use chirpbed::model::{backward, forward, init_params, ModelDims, ModelParams, ParamBlocks, Similarity, Upstream, BLOCK_NAMES};
use chirpbed::train::{distillation_loss, orthogonality_loss, source_ce, species_ce};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    SpeciesLinear,
    SpeciesPrototype,
    Source,
    Distillation,
    Orthogonality,
}

pub const TERMS: [Term; 5] = [
    Term::SpeciesLinear,
    Term::SpeciesPrototype,
    Term::Source,
    Term::Distillation,
    Term::Orthogonality,
];

pub struct Case {
    pub params: ModelParams,
    pub spec: LogMelSpectrogram,
    pub targets: Vec<usize>,
    pub source: usize,
    pub dropout: f64,
    pub mask_seed: u64,
    /// Teacher logits frozen at the base parameters.
    pub teacher: Vec<f64>,
}

pub fn dims(d: usize, similarity: Similarity) -> ModelDims {
    ModelDims {
        frames: 10,
        mel_bins: 8,
        grid_t: 5,
        grid_f: 3,
        hidden: 12,
        d,
        num_classes: 3,
        prototypes_per_class: 2,
        source_rank: 4,
        num_sources: 5,
        similarity,
    }
}

pub fn case(dims: ModelDims, seed: u64, dropout: f64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(dims, &mut rng).unwrap();
    let spec = LogMelSpectrogram {
        frames: dims.frames,
        bins: dims.mel_bins,
        values: (0..dims.frames * dims.mel_bins).map(|_| rng.random_range(-1.0..1.0)).collect(),
        frame_rate: 100.0,
    };
    let mut c = Case {
        params,
        spec,
        targets: vec![0, 2],
        source: 3,
        dropout,
        mask_seed: seed + 1000,
        teacher: Vec::new(),
    };
    c.teacher = run(&c, &c.params).1.prototype;
    c
}

fn run(c: &Case, p: &ModelParams) -> (chirpbed::model::ForwardTrace, chirpbed::model::HeadOutputs) {
    let mut rng = ChaCha8Rng::seed_from_u64(c.mask_seed);
    let (_, out, trace) = forward(&c.spec, p, c.dropout, Some(&mut rng)).unwrap();
    (trace, out)
}

pub fn loss(term: Term, c: &Case, p: &ModelParams) -> f64 {
    let (_, out) = run(c, p);
    let dims = &p.dims;
    match term {
        Term::SpeciesLinear => species_ce(&out.linear, &c.targets).unwrap().0,
        Term::SpeciesPrototype => species_ce(&out.prototype, &c.targets).unwrap().0,
        Term::Source => source_ce(&out.source, c.source).unwrap().0,
        Term::Distillation => distillation_loss(&c.teacher, &out.linear).unwrap().0,
        Term::Orthogonality => {
            orthogonality_loss(&p.blocks.protos, dims.num_classes, dims.prototypes_per_class, dims.d)
                .unwrap()
                .0
        }
    }
}

pub fn analytic(term: Term, c: &Case) -> ParamBlocks {
    let p = &c.params;
    let (trace, out) = run(c, p);
    let mut g = ParamBlocks::zeros(&p.dims);
    let up = match term {
        Term::SpeciesLinear => Some((species_ce(&out.linear, &c.targets).unwrap().1, 0)),
        Term::SpeciesPrototype => Some((species_ce(&out.prototype, &c.targets).unwrap().1, 1)),
        Term::Source => Some((source_ce(&out.source, c.source).unwrap().1, 2)),
        Term::Distillation => Some((distillation_loss(&c.teacher, &out.linear).unwrap().1, 0)),
        Term::Orthogonality => None,
    };
    match up {
        Some((grad, head)) => {
            let mut u = Upstream::default();
            match head {
                0 => u.linear = Some(&grad),
                1 => u.prototype = Some(&grad),
                _ => u.source = Some(&grad),
            }
            backward(&trace, p, &u, &mut g).unwrap();
        }
        None => {
            let dims = &p.dims;
            g.protos = orthogonality_loss(&p.blocks.protos, dims.num_classes, dims.prototypes_per_class, dims.d)
                .unwrap()
                .1;
        }
    }
    g
}

/// Blocks the term's gradient flows into. Prototype terms stop at the prototypes.
pub fn reaches(term: Term, block: usize) -> bool {
    match term {
        Term::SpeciesLinear | Term::Distillation => block <= 5,
        Term::SpeciesPrototype | Term::Orthogonality => block == 6,
        Term::Source => block <= 3 || block >= 7,
    }
}

pub fn numeric(term: Term, c: &Case, block: usize, h: f64) -> Vec<f64> {
    let mut p = c.params.clone();
    let n = p.blocks.as_slices()[block].len();
    (0..n)
        .map(|i| {
            let orig = p.blocks.as_slices()[block][i];
            p.blocks.as_mut_slices()[block][i] = orig + h;
            p.touch();
            let up = loss(term, c, &p);
            p.blocks.as_mut_slices()[block][i] = orig - h;
            p.touch();
            let down = loss(term, c, &p);
            p.blocks.as_mut_slices()[block][i] = orig;
            p.touch();
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub struct BlockReport {
    pub term: Term,
    pub block: &'static str,
    pub rel_err: f64,
}

/// Compare every block for every term. Blocks outside the term's reach must be exactly zero
/// analytically; blocks inside are compared with central differences.
pub fn check_all(c: &Case, h: f64) -> (Vec<BlockReport>, bool) {
    let mut reports = Vec::new();
    let mut exact_zero = true;
    for term in TERMS {
        let a = analytic(term, c);
        for (b, name) in BLOCK_NAMES.iter().enumerate() {
            let ab = a.as_slices()[b];
            if reaches(term, b) {
                let nb = numeric(term, c, b, h);
                reports.push(BlockReport {
                    term,
                    block: name,
                    rel_err: rel_err(ab, &nb),
                });
            } else if ab.iter().any(|&x| x != 0.0) {
                exact_zero = false;
            }
        }
    }
    (reports, exact_zero)
}
