//! Evolutionary search over per-layer adapter configurations on a trained,
//! frozen supernet: uniform initialization, validation-set fitness, top-K
//! selection, uniform crossover, per-gene mutation, and search-space
//! accounting.
//!
//! Every breeding step produces one pool of random genomes, one of crossover
//! children, and one of mutation children; parents survive alongside them, so
//! the best fitness never decreases. Fitness of previously seen genomes is
//! cached — evaluation is deterministic, so the cache is exact.

use std::collections::HashMap;

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glora::{LayerConfig, LayerSearchSpace, ModelConfig, SUPPORT_ROLES};
use crate::supernet::{evaluate_model, ToyModel};
use crate::synth::{Dataset, Split, TaskKind};
use crate::tensor::Scalar;

/// Flat encoding of a [`ModelConfig`]: one gene per (layer, role), each an
/// index into that layer's admissible option list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genome {
    genes: Vec<usize>,
}

impl Genome {
    pub fn genes(&self) -> &[usize] {
        &self.genes
    }

    pub fn gene_count(&self) -> usize {
        self.genes.len()
    }

    /// Expected gene count for a space list.
    pub fn expected_len(spaces: &[LayerSearchSpace]) -> usize {
        spaces.len() * SUPPORT_ROLES.len()
    }

    /// Decode into a per-layer config. Always validates for the spaces the
    /// genome was built from.
    pub fn decode(&self, spaces: &[LayerSearchSpace]) -> Result<ModelConfig> {
        if self.genes.len() != Self::expected_len(spaces) {
            return Err(Error::Contract(format!(
                "genome has {} genes, spaces need {}",
                self.genes.len(),
                Self::expected_len(spaces)
            )));
        }
        let mut layers = Vec::with_capacity(spaces.len());
        for (layer_idx, space) in spaces.iter().enumerate() {
            let mut cfg = LayerConfig::all_none();
            for (role_idx, &role) in SUPPORT_ROLES.iter().enumerate() {
                let gene = self.genes[layer_idx * SUPPORT_ROLES.len() + role_idx];
                let options = space.options(role);
                let kind = *options.get(gene).ok_or_else(|| {
                    Error::Contract(format!(
                        "gene {gene} out of range for layer {layer_idx} role {role}"
                    ))
                })?;
                cfg.set(role, kind);
            }
            layers.push(cfg);
        }
        Ok(ModelConfig { layers })
    }
}

/// Search hyperparameters: pool size per operator, generations, parent count,
/// crossover and per-gene mutation probabilities, seed, and evaluation
/// threads (thread count never changes results).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvoSettings {
    pub population: usize,
    pub generations: usize,
    pub parents: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EvoSettings {
    fn default() -> Self {
        EvoSettings {
            population: 50,
            generations: 20,
            parents: 10,
            crossover_prob: 0.2,
            mutation_prob: 0.2,
            seed: 0,
            threads: 1,
        }
    }
}

impl EvoSettings {
    fn check(&self) -> Result<()> {
        if self.population == 0 || self.parents == 0 {
            return Err(Error::Contract(
                "population and parent counts must be positive".into(),
            ));
        }
        for (name, p) in [
            ("crossover", self.crossover_prob),
            ("mutation", self.mutation_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// A genome with its measured fitness (validation accuracy for
/// classification, negative validation loss for regression) and the trainable
/// parameter count of the decoded config.
#[derive(Clone, Debug, PartialEq)]
pub struct FitnessRecord {
    pub genome: Genome,
    pub fitness: f64,
    pub param_count: usize,
}

impl FitnessRecord {
    /// Selection order: higher fitness first, then fewer parameters, then
    /// genome lexicographic order. Total and deterministic.
    fn better_than(&self, other: &Self) -> bool {
        match self.fitness.total_cmp(&other.fitness) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => match self.param_count.cmp(&other.param_count) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => self.genome < other.genome,
            },
        }
    }
}

/// Best fitness reached by the end of each generation, plus how many new
/// evaluations that generation cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStat {
    pub generation: usize,
    pub best_fitness: f64,
    pub evaluations: usize,
}

/// The winning record plus the per-generation trace.
#[derive(Clone, Debug)]
pub struct EvoOutcome {
    pub best: FitnessRecord,
    pub history: Vec<GenerationStat>,
}

/// `n` independent uniform genomes; duplicates are permitted.
pub fn init_population(spaces: &[LayerSearchSpace], n: usize, rng: &mut impl Rng) -> Vec<Genome> {
    (0..n).map(|_| random_genome(spaces, rng)).collect()
}

fn random_genome(spaces: &[LayerSearchSpace], rng: &mut impl Rng) -> Genome {
    let mut genes = Vec::with_capacity(Genome::expected_len(spaces));
    for space in spaces {
        for &role in &SUPPORT_ROLES {
            genes.push(rng.random_range(0..space.option_count(role)));
        }
    }
    Genome { genes }
}

/// Decode and score one genome on the validation split. The supernet is
/// read-only here.
pub fn evaluate_fitness<T: Scalar>(
    supernet: &ToyModel<T>,
    spaces: &[LayerSearchSpace],
    genome: &Genome,
    val: &Dataset<T>,
) -> Result<FitnessRecord> {
    let config = genome.decode(spaces)?;
    let metrics = evaluate_model(supernet, Some(&config), val, Split::Val)?;
    let fitness = match val.task() {
        TaskKind::Classification => metrics.accuracy.expect("classification has accuracy"),
        TaskKind::Regression => -metrics.loss,
    };
    if !fitness.is_finite() {
        return Err(Error::Contract("fitness is not finite".into()));
    }
    Ok(FitnessRecord {
        genome: genome.clone(),
        fitness,
        param_count: supernet.trainable_param_count(&config),
    })
}

/// The `k` best records under the deterministic selection order.
pub fn select_topk(records: &[FitnessRecord], k: usize) -> Result<Vec<FitnessRecord>> {
    if k > records.len() {
        return Err(Error::Contract(format!(
            "cannot select top {k} of {} records",
            records.len()
        )));
    }
    let mut sorted: Vec<FitnessRecord> = records.to_vec();
    sorted.sort_by(|a, b| {
        if a.better_than(b) {
            std::cmp::Ordering::Less
        } else if b.better_than(a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// Uniform gene-wise crossover: each child gene comes from either parent with
/// probability one half.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut impl Rng) -> Result<Genome> {
    if a.genes.len() != b.genes.len() {
        return Err(Error::Contract(format!(
            "crossover layouts disagree: {} vs {} genes",
            a.genes.len(),
            b.genes.len()
        )));
    }
    let genes = a
        .genes
        .iter()
        .zip(&b.genes)
        .map(|(&ga, &gb)| if rng.random_bool(0.5) { ga } else { gb })
        .collect();
    Ok(Genome { genes })
}

/// Resample each gene uniformly from its option list with probability `p`;
/// resampling may reproduce the same allele.
pub fn mutate(parent: &Genome, spaces: &[LayerSearchSpace], p: f64, rng: &mut impl Rng) -> Genome {
    assert!(
        (0.0..=1.0).contains(&p),
        "mutation probability {p} outside [0, 1]"
    );
    let mut genes = parent.genes.clone();
    let mut i = 0usize;
    for space in spaces {
        for &role in &SUPPORT_ROLES {
            if rng.random::<f64>() < p {
                genes[i] = rng.random_range(0..space.option_count(role));
            }
            i += 1;
        }
    }
    Genome { genes }
}

/// Evaluate a batch of genomes, reusing cached records and splitting fresh
/// work across `threads`. Results are keyed by genome, so thread count and
/// completion order cannot change them.
fn evaluate_batch<T: Scalar>(
    supernet: &ToyModel<T>,
    spaces: &[LayerSearchSpace],
    val: &Dataset<T>,
    genomes: &[Genome],
    cache: &mut HashMap<Genome, FitnessRecord>,
    threads: usize,
) -> Result<usize> {
    let mut fresh: Vec<Genome> = Vec::new();
    for g in genomes {
        if !cache.contains_key(g) && !fresh.contains(g) {
            fresh.push(g.clone());
        }
    }
    let evaluations = fresh.len();
    if fresh.is_empty() {
        return Ok(0);
    }

    let records: Vec<Result<FitnessRecord>> = if threads <= 1 || fresh.len() == 1 {
        fresh
            .iter()
            .map(|g| evaluate_fitness(supernet, spaces, g, val))
            .collect()
    } else {
        let workers = threads.min(fresh.len());
        let chunk = fresh.len().div_ceil(workers);
        let mut out: Vec<Option<Result<FitnessRecord>>> = (0..fresh.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (slice_idx, genome_slice) in fresh.chunks(chunk).enumerate() {
                handles.push((
                    slice_idx * chunk,
                    scope.spawn(move || {
                        genome_slice
                            .iter()
                            .map(|g| evaluate_fitness(supernet, spaces, g, val))
                            .collect::<Vec<_>>()
                    }),
                ));
            }
            for (base, handle) in handles {
                for (offset, record) in handle
                    .join()
                    .expect("fitness worker panicked")
                    .into_iter()
                    .enumerate()
                {
                    out[base + offset] = Some(record);
                }
            }
        });
        out.into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    };

    for (genome, record) in fresh.into_iter().zip(records) {
        cache.insert(genome, record?);
    }
    Ok(evaluations)
}

/// Run the generation loop and return the best record found plus the history.
///
/// Each generation selects the top-K parents from the surviving pool, then
/// breeds three pools of `population` children: uniform random genomes,
/// crossover children (two parents drawn uniformly; with probability
/// `crossover_prob` genes mix, otherwise the first parent is copied), and
/// mutation children. Parents carry over, which makes the best fitness
/// monotone.
pub fn evolve<T: Scalar>(
    supernet: &ToyModel<T>,
    spaces: &[LayerSearchSpace],
    val: &Dataset<T>,
    settings: &EvoSettings,
) -> Result<EvoOutcome> {
    settings.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut cache: HashMap<Genome, FitnessRecord> = HashMap::new();

    let initial = init_population(spaces, settings.population, &mut rng);
    let mut evaluations = evaluate_batch(
        supernet,
        spaces,
        val,
        &initial,
        &mut cache,
        settings.threads,
    )?;
    let mut pool: Vec<FitnessRecord> = initial.iter().map(|g| cache[g].clone()).collect();
    let mut history = vec![GenerationStat {
        generation: 0,
        best_fitness: select_topk(&pool, 1)?[0].fitness,
        evaluations,
    }];

    for generation in 1..=settings.generations {
        let parents = select_topk(&pool, settings.parents.min(pool.len()))?;

        let mut children: Vec<Genome> = Vec::with_capacity(3 * settings.population);
        for _ in 0..settings.population {
            children.push(random_genome(spaces, &mut rng));
        }
        for _ in 0..settings.population {
            let a = &parents[rng.random_range(0..parents.len())].genome;
            let b = &parents[rng.random_range(0..parents.len())].genome;
            let child = if rng.random::<f64>() < settings.crossover_prob {
                crossover(a, b, &mut rng)?
            } else {
                a.clone()
            };
            children.push(child);
        }
        for _ in 0..settings.population {
            let parent = &parents[rng.random_range(0..parents.len())].genome;
            children.push(mutate(parent, spaces, settings.mutation_prob, &mut rng));
        }

        evaluations = evaluate_batch(
            supernet,
            spaces,
            val,
            &children,
            &mut cache,
            settings.threads,
        )?;
        pool = children.iter().map(|g| cache[g].clone()).collect();
        pool.extend(parents);

        history.push(GenerationStat {
            generation,
            best_fitness: select_topk(&pool, 1)?[0].fitness,
            evaluations,
        });
    }

    let best = select_topk(&pool, 1)?.remove(0);
    Ok(EvoOutcome { best, history })
}

/// Per-layer option counts, their sum over layers (the headline subnet count
/// for a stack of identical layers), and the exact combinatorial product.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpaceSize {
    pub per_layer: Vec<u64>,
    pub layerwise_sum: u64,
    pub combinatorial_total: BigUint,
}

pub fn search_space_size(spaces: &[LayerSearchSpace]) -> SearchSpaceSize {
    let per_layer: Vec<u64> = spaces.iter().map(LayerSearchSpace::total_options).collect();
    let layerwise_sum = per_layer.iter().sum();
    let combinatorial_total = per_layer
        .iter()
        .fold(BigUint::from(1u32), |acc, &n| acc * BigUint::from(n));
    SearchSpaceSize {
        per_layer,
        layerwise_sum,
        combinatorial_total,
    }
}

/// Cartesian product of the per-layer config lists; the brute-force oracle
/// for small spaces. Errors above `limit` configs.
pub fn enumerate_model_configs(
    spaces: &[LayerSearchSpace],
    limit: usize,
) -> Result<Vec<ModelConfig>> {
    let size = search_space_size(spaces);
    if size.combinatorial_total > BigUint::from(limit) {
        return Err(Error::Contract(format!(
            "space holds {} configs, above the enumeration limit {limit}",
            size.combinatorial_total
        )));
    }
    let mut out = vec![ModelConfig { layers: Vec::new() }];
    for space in spaces {
        let layer_configs = space.enumerate_configs();
        let mut next = Vec::with_capacity(out.len() * layer_configs.len());
        for partial in &out {
            for lc in &layer_configs {
                let mut cfg = partial.clone();
                cfg.layers.push(*lc);
                next.push(cfg);
            }
        }
        out = next;
    }
    Ok(out)
}
