"""Estimator wrapper around the learner so it plugs into the policy runners."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Td3Hyper, load_actor, save_actor, smoothed, train


class TD3Allocator(BaseEstimator):
    """Learned allocation policy.

    ``fit(env)`` trains on the environment; ``predict(states)`` maps raw
    observations to squashed actions in the primary-first layout;
    ``allocate(env)`` decodes the action for the env's current round.
    The deployed network is the Polyak-averaged target actor when
    ``deploy="target"``.
    """

    name = "td3"

    def __init__(self, gamma=0.99, eta_a=5e-6, eta_c=1e-3, kappa=5e-3, update_every=2,
                 explore_steps=512, noise_std=0.1, target_noise_std=0.2, noise_clip=0.5,
                 buffer_capacity=100_000, batch_size=128, max_steps=5000, hidden=(64, 64),
                 optimizer="adam", deploy="online", random_state=0):
        self.gamma = gamma
        self.eta_a = eta_a
        self.eta_c = eta_c
        self.kappa = kappa
        self.update_every = update_every
        self.explore_steps = explore_steps
        self.noise_std = noise_std
        self.target_noise_std = target_noise_std
        self.noise_clip = noise_clip
        self.buffer_capacity = buffer_capacity
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.hidden = hidden
        self.optimizer = optimizer
        self.deploy = deploy
        self.random_state = random_state

    def hyper(self) -> Td3Hyper:
        p = self.get_params()
        p.pop("deploy")
        p.pop("random_state")
        return Td3Hyper(**p)

    @classmethod
    def from_hyper(cls, hyper: Td3Hyper, **kw):
        d = hyper.as_dict()
        keep = set(cls().get_params())
        return cls(**{k: v for k, v in d.items() if k in keep}, **kw)

    def fit(self, env, y=None):
        if self.deploy not in ("online", "target"):
            raise ValueError("deploy must be 'online' or 'target'")
        result = train(env, self.hyper(), self.random_state)
        self.actor_ = result.target_actor if self.deploy == "target" else result.actor
        self.scaler_ = result.scaler
        self.reward_trace_ = result.rewards
        self.feasible_trace_ = result.feasible
        return self

    def predict(self, states):
        check_is_fitted(self, "actor_")
        return self.actor_(self.scaler_.transform(states))

    def reset(self, seed=None):
        return self

    def allocate(self, env):
        return env.decode(self.predict(env.observe().to_array())[0])

    def save(self, path):
        check_is_fitted(self, "actor_")
        save_actor(path, self.actor_, self.scaler_)

    @classmethod
    def load(cls, path, **params):
        est = cls(**params)
        est.actor_, est.scaler_ = load_actor(path)
        return est


def reward_trace_rows(rewards, window=200):
    """``(step, reward, smoothed_reward)`` tuples, steps counted from 1."""
    r = np.asarray(rewards, dtype=float)
    return list(zip(range(1, len(r) + 1), r.tolist(), smoothed(r, window).tolist()))
