import datetime as dt

import numpy as np

from stcount.core import Adjacency, CountPanel


def make_panel(values, start=dt.date(2020, 6, 28), regions=None):
    values = np.asarray(values)
    K, N = values.shape
    regions = regions or [f"R{k}" for k in range(K)]
    return CountPanel(regions, [start + dt.timedelta(days=i) for i in range(N)], values)


def path_adjacency(K):
    w = np.eye(K, k=1) + np.eye(K, k=-1)
    return Adjacency([f"R{k}" for k in range(K)], w)


def random_adjacency(rng, K, p=0.4):
    upper = np.triu(rng.uniform(size=(K, K)) < p, k=1).astype(float)
    return Adjacency([f"R{k}" for k in range(K)], upper + upper.T)
