//! Python bindings for the speak/silence policy toolkit.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use duplex_rl::checkpoint::{load_checkpoint, save_checkpoint};
use duplex_rl::gradcheck::{run_gradcheck, GradcheckConfig};
use duplex_rl::metrics;
use duplex_rl::reward::{self, RewardConfig};
use duplex_rl::rollout::sample_rollout;
use duplex_rl::scenario::{episodes_to_jsonl, generate_suite, ScenarioKind, ScenarioParams};
use duplex_rl::{projection, vocab, EpisodeInput, Error, IntervalSet, StateSequence, TimeInterval};

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for duplex_rl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

// a plain Vec<u8> would surface as bytes
fn state_list(states: &StateSequence) -> Vec<u32> {
    states.as_slice().iter().map(|&s| u32::from(s)).collect()
}

#[pyclass(name = "VocabPartition", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVocabPartition {
    inner: vocab::VocabPartition,
}

#[pymethods]
impl PyVocabPartition {
    #[new]
    fn new(vocab_size: usize, pad_ids: Vec<usize>) -> PyResult<Self> {
        Ok(PyVocabPartition {
            inner: vocab::VocabPartition::new(vocab_size, pad_ids).py()?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn pad_ids(&self) -> Vec<usize> {
        self.inner.pad_ids().to_vec()
    }

    #[getter]
    fn non_pad_ids(&self) -> Vec<usize> {
        self.inner.non_pad_ids().to_vec()
    }

    fn state_of(&self, id: usize) -> PyResult<u8> {
        self.inner.state_of(id).py()
    }

    fn __repr__(&self) -> String {
        format!("VocabPartition(vocab_size={}, pad_ids={:?})", self.inner.vocab_size(), self.inner.pad_ids())
    }
}

/// Summed (inactive, active) state logits.
#[pyfunction]
fn project_logits(logits: Vec<f64>, partition: &PyVocabPartition) -> PyResult<(f64, f64)> {
    let s = projection::project_logits(&logits, &partition.inner).py()?;
    Ok((s.inactive, s.active))
}

/// (p_inactive, p_active) of the projected state policy.
#[pyfunction]
fn state_distribution(logits: Vec<f64>, partition: &PyVocabPartition) -> PyResult<(f64, f64)> {
    let d = projection::state_distribution(projection::project_logits(&logits, &partition.inner).py()?);
    Ok((d.p_inactive(), d.p_active()))
}

#[pyfunction]
fn binary_kl(p: (f64, f64), q: (f64, f64)) -> PyResult<f64> {
    let p = projection::StateDistribution::from_probs(p.0, p.1).py()?;
    let q = projection::StateDistribution::from_probs(q.0, q.1).py()?;
    Ok(projection::binary_kl(&p, &q))
}

#[pyfunction]
fn categorical_kl(p_logits: Vec<f64>, q_logits: Vec<f64>) -> PyResult<f64> {
    projection::categorical_kl(&p_logits, &q_logits).py()
}

#[pyfunction]
fn extract_states(tokens: Vec<usize>, partition: &PyVocabPartition) -> PyResult<Vec<u32>> {
    Ok(state_list(&vocab::extract_states(&tokens, &partition.inner).py()?))
}

#[pyfunction]
fn normalize_intervals(pairs: Vec<(f64, f64)>) -> PyResult<Vec<(f64, f64)>> {
    let set = duplex_rl::normalize_intervals(&pairs).py()?;
    Ok(set.iter().map(|i| (i.start(), i.end())).collect())
}

#[pyfunction]
fn intersect_duration(query: (f64, f64), pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    let q = TimeInterval::new(query.0, query.1).py()?;
    let set = IntervalSet::from_pairs(&pairs).py()?;
    Ok(duplex_rl::intersect_duration(&q, &set))
}

/// Reward breakdown of a model state sequence against user speech intervals.
#[pyfunction]
#[pyo3(signature = (states, user, delta_t=0.08, tau_int=1.0, tau_re=1.0, gap_merge_tokens=0))]
fn total_reward<'py>(
    py: Python<'py>,
    states: Vec<u8>,
    user: Vec<(f64, f64)>,
    delta_t: f64,
    tau_int: f64,
    tau_re: f64,
    gap_merge_tokens: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RewardConfig {
        delta_t,
        tau_int,
        tau_re,
        gap_merge_tokens,
    };
    cfg.validate().py()?;
    let states = StateSequence::new(states).py()?;
    let user = IntervalSet::from_pairs(&user).py()?;
    let b = reward::total_reward(&states, &user, &cfg);
    let d = PyDict::new(py);
    d.set_item("utterances", b.utterances.iter().map(|i| (i.start(), i.end())).collect::<Vec<_>>())?;
    d.set_item("overlaps", b.overlaps)?;
    d.set_item("latencies", b.latencies)?;
    d.set_item("r_int", b.r_int)?;
    d.set_item("r_re", b.r_re)?;
    d.set_item("r_total", b.r_total)?;
    Ok(d)
}

#[pyfunction]
fn group_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(reward::group_advantages(&rewards).py()?.advantages)
}

#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: duplex_rl::Policy,
}

#[pymethods]
impl PyPolicy {
    /// Seeded initialization; keyword arguments override config defaults.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = serde_json::to_value(duplex_rl::PolicyConfig::default()).expect("serializable");
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value: u64 = v.extract()?;
                cfg[key.as_str()] = value.into();
            }
        }
        let cfg: duplex_rl::PolicyConfig =
            serde_json::from_value(cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyPolicy {
            inner: duplex_rl::Policy::init(cfg).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPolicy {
            inner: load_checkpoint(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).py()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    /// Per-frame logits; frame t sees user_bits[..=t] and tokens[..t].
    fn forward(&self, user_bits: Vec<u8>, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let ep = EpisodeInput::new(user_bits);
        let logits = self.inner.forward(&ep, &tokens).py()?;
        Ok(logits.iter().map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (user_bits, partition, temperature=1.0, seed=0))]
    fn sample_rollout<'py>(
        &self,
        py: Python<'py>,
        user_bits: Vec<u8>,
        partition: &PyVocabPartition,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ep = EpisodeInput::new(user_bits);
        let r = sample_rollout(&self.inner, &ep, &partition.inner, temperature, seed).py()?;
        let d = PyDict::new(py);
        d.set_item("tokens", r.tokens)?;
        d.set_item("states", state_list(&r.states))?;
        d.set_item("state_logprobs_old", r.state_logprobs_old)?;
        d.set_item("token_logprobs_old", r.token_logprobs_old)?;
        Ok(d)
    }
}

#[pyfunction]
fn seq_rep_n(tokens: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::seq_rep_n(&tokens, n).py()
}

#[pyfunction]
fn self_bleu(samples: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::self_bleu(&samples).py()
}

#[pyfunction]
fn bleu(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> PyResult<f64> {
    let refs: Vec<&[String]> = references.iter().map(Vec::as_slice).collect();
    metrics::bleu(&hypothesis, &refs).py()
}

#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::jsd(&p, &q).py()
}

#[pyfunction]
fn tokenize_transcript(text: &str) -> Vec<String> {
    metrics::tokenize_transcript(text)
}

/// Episode JSONL for a generated scenario suite.
#[pyfunction]
fn simulate(kind: &str, count: usize, seed: u64) -> PyResult<String> {
    let kind: ScenarioKind = kind.parse().py()?;
    let params = ScenarioParams::default();
    let specs = generate_suite(kind, count, seed, &params).py()?;
    Ok(episodes_to_jsonl(&specs, params.delta_t))
}

/// (passed, max relative error) of the finite-difference gradient check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<(bool, f64)> {
    let r = run_gradcheck(&GradcheckConfig {
        seed,
        ..Default::default()
    })
    .py()?;
    Ok((r.passed, r.max_rel_err))
}

#[pymodule]
#[pyo3(name = "duplex_rl")]
fn duplex_rl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabPartition>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(project_logits, m)?)?;
    m.add_function(wrap_pyfunction!(state_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(binary_kl, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_kl, m)?)?;
    m.add_function(wrap_pyfunction!(extract_states, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(intersect_duration, m)?)?;
    m.add_function(wrap_pyfunction!(total_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(seq_rep_n, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
