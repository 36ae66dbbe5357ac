"""Controlled HMMs with exact forward filtering, used as oracles for the
PSR filter and the two-stage regression on indicator features.

Convention (matches the feature alignment): at step t the agent takes a_t,
the hidden state moves s_t -> s_{t+1} ~ T[a_t], then o_t ~ E[s_{t+1}].
With k = 1 the predictive state is Q[o, a] = P(o_t = o | history, a_t = a).
"""

import itertools
from dataclasses import dataclass

import numpy as np

from rpsp.features import FeaturePipeline, IndicatorMap
from rpsp.psr import PSRParams


@dataclass
class HMM:
    T: np.ndarray  # (A, S, S), T[a, s, s'] = P(s' | s, a)
    E: np.ndarray  # (S, O), E[s, o] = P(o | s)
    b0: np.ndarray  # (S,)

    @property
    def n_states(self):
        return self.E.shape[0]

    @property
    def n_obs(self):
        return self.E.shape[1]

    @property
    def n_act(self):
        return self.T.shape[0]


def random_hmm(rng, S, O, A):
    # Dirichlet(1) rows bounded away from zero keep every observation possible.
    T = rng.dirichlet(np.ones(S), size=(A, S)) * 0.8 + 0.2 / S
    E = rng.dirichlet(np.ones(O), size=S) * 0.8 + 0.2 / O
    return HMM(T, E, rng.dirichlet(np.ones(S)))


def random_sizes(rng):
    """(S, O, A) with S <= 4, O <= 3, A <= 2 and a belief that one-step
    predictions identify: q has at most A (O - 1) + 1 free coordinates."""
    O = int(rng.integers(2, 4))
    A = int(rng.integers(1, 3))
    S = int(rng.integers(2, min(4, A * (O - 1) + 1) + 1))
    return S, O, A


def predictive(hmm, b):
    """Q[o, a] = P(o | b, a)."""
    return np.einsum("s,ast,to->oa", b, hmm.T, hmm.E)


def extended(hmm, b):
    """(P_xi[o', o, a', a], P_o[o1, o2, a]) for the one-step extension of belief b."""
    joint = np.einsum("s,ast,to,btu,up->poba", b, hmm.T, hmm.E, hmm.T, hmm.E)
    q = predictive(hmm, b)
    P_o = np.einsum("ij,ia->ija", np.eye(hmm.n_obs), q)
    return joint, P_o


def belief_update(hmm, b, a, o):
    nb = (b @ hmm.T[a]) * hmm.E[:, o]
    return nb / nb.sum()


def indicator_pipeline(hmm, history=None, w_h=1):
    return FeaturePipeline(
        obs=IndicatorMap(hmm.n_obs), act=IndicatorMap(hmm.n_act),
        future_obs=IndicatorMap(hmm.n_obs), future_act=IndicatorMap(hmm.n_act),
        history=history, k=1, w_h=w_h, obs_dim=1, act_dim=1,
    )


def exact_psr(hmm, lam=1e-9):
    """PSR whose extension map reproduces the HMM exactly on reachable beliefs.

    q and the extended state are both linear in the belief, q = F b and
    p = G b; with F of full column rank, W = G F^+ is exact.
    """
    S = hmm.n_states
    basis = np.eye(S)
    F = np.stack([predictive(hmm, e).reshape(-1) for e in basis], axis=1)
    G_xi = np.stack([extended(hmm, e)[0].reshape(-1) for e in basis], axis=1)
    G_o = np.stack([extended(hmm, e)[1].reshape(-1) for e in basis], axis=1)
    assert np.linalg.matrix_rank(F) == S
    Fp = np.linalg.pinv(F)
    O, A = hmm.n_obs, hmm.n_act
    return PSRParams(
        q0=predictive(hmm, hmm.b0), W_ext_xi=G_xi @ Fp, W_ext_o=G_o @ Fp,
        W_pred=np.zeros((1, O * A * A)), d_o=O, d_a=A, lam=lam, pipeline=indicator_pipeline(hmm),
    )


def sample(hmm, rng, T):
    """(actions, observations) under uniformly random actions."""
    s = rng.choice(hmm.n_states, p=hmm.b0)
    acts, obs = [], []
    for _ in range(T):
        a = int(rng.integers(hmm.n_act))
        s = rng.choice(hmm.n_states, p=hmm.T[a, s])
        acts.append(a)
        obs.append(int(rng.choice(hmm.n_obs, p=hmm.E[s])))
    return np.array(acts), np.array(obs)


class PairIndicator:
    """One-hot of a history window of (a, o) integer pairs."""

    def __init__(self, n_act, n_obs, w=1):
        self.radix = [n_act, n_obs] * w
        self.dim = int(np.prod(self.radix))

    def __call__(self, x):
        x = np.asarray(x).astype(int)
        idx = np.ravel_multi_index(tuple(x[..., j] for j in range(x.shape[-1])), self.radix)
        return np.eye(self.dim)[idx]


def enumerate_triples(hmm):
    """All length-3 (action, observation) sequences under uniform actions with exact probabilities."""
    A, O = hmm.n_act, hmm.n_obs
    for acts in itertools.product(range(A), repeat=3):
        for obs in itertools.product(range(O), repeat=3):
            b, p = hmm.b0, 1.0
            for a, o in zip(acts, obs):
                q = predictive(hmm, b)
                p *= q[o, a] / A
                b = belief_update(hmm, b, a, o)
            yield np.array(acts), np.array(obs), p
