"""Shared helpers for building random fixtures against the public API."""

from __future__ import annotations

import numpy as np

from seqannot.hmm import HmmModel, StateSpace


def random_model(rng: np.random.Generator, n_states: int) -> HmmModel:
    """Model with Dirichlet-sampled rows; all entries strictly positive."""
    states = StateSpace(tuple(f"s{i}" for i in range(n_states)))
    priors = rng.dirichlet(np.ones(n_states))
    transitions = rng.dirichlet(np.ones(n_states), size=n_states)
    emission = rng.dirichlet(np.ones(n_states), size=n_states)
    return HmmModel(states, priors, transitions, emission)


def path_log_prob(model: HmmModel, path, obs) -> float:
    """Log probability of one explicit state path emitting obs."""
    with np.errstate(divide="ignore"):
        log_pi = np.log(model.priors)
        log_a = np.log(model.transitions)
        log_e = np.log(model.emission)
    total = log_pi[path[0]] + log_e[path[0], obs[0]]
    for t in range(1, len(obs)):
        total += log_a[path[t - 1], path[t]] + log_e[path[t], obs[t]]
    return float(total)
