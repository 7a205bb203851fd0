"""scikit-learn style neighbour search on top of :class:`~hashforest.store.Store`."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .forest import TableConfig
from .store import Store
from .vectors import SparseVector


def _rows(X, first_id: int) -> list[SparseVector]:
    X = sp.csr_matrix(X, dtype=np.float64, copy=True)
    X.sum_duplicates()
    X.eliminate_zeros()
    X.sort_indices()
    out = []
    for i in range(X.shape[0]):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        if lo == hi:
            raise ValueError(f"row {i} is all zeros; angular distance is undefined")
        out.append(SparseVector(first_id + i, X.shape[1], X.indices[lo:hi], X.data[lo:hi]))
    return out


class LSHNeighbors(BaseEstimator):
    """Approximate angular nearest neighbours.

    Sample indices are the row positions across ``fit`` and later
    ``partial_fit`` calls. ``kneighbors`` pads short results with index -1
    and distance ``inf``. Distances are angles divided by pi.
    """

    def __init__(self, n_neighbors=5, radius=0.1, tables=10, part_bits=4, tree_bits=4,
                 bucket_cap=4, fanout=128, key_bits=32, random_state=0, n_workers=1):
        self.n_neighbors = n_neighbors
        self.radius = radius
        self.tables = tables
        self.part_bits = part_bits
        self.tree_bits = tree_bits
        self.bucket_cap = bucket_cap
        self.fanout = fanout
        self.key_bits = key_bits
        self.random_state = random_state
        self.n_workers = n_workers

    def _config(self) -> TableConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TableConfig(tables=self.tables, part_bits=self.part_bits, tree_bits=self.tree_bits,
                           bucket_cap=self.bucket_cap, fanout=self.fanout, key_bits=self.key_bits,
                           seed=seed)

    def fit(self, X, y=None):
        X = check_array(X, accept_sparse="csr")
        if getattr(self, "store_", None) is not None:
            self.store_.close()
        self.n_features_in_ = X.shape[1]
        self.store_ = Store(X.shape[1], self._config(), workers=self.n_workers)
        self.n_samples_fit_ = 0
        return self._add(X)

    def partial_fit(self, X, y=None):
        if getattr(self, "store_", None) is None:
            return self.fit(X)
        return self._add(self._validate(X))

    def _add(self, X):
        vectors = _rows(X, self.n_samples_fit_)
        self.store_.put_many(vectors)
        self.n_samples_fit_ += len(vectors)
        return self

    def _validate(self, X):
        check_is_fitted(self, "store_")
        X = check_array(X, accept_sparse="csr")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _search(self, X, **query):
        return [self.store_.query(q, **query) for q in _rows(X, 0)]

    def kneighbors(self, X, n_neighbors=None, return_distance=True):
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        if k < 1:
            raise ValueError("n_neighbors must be positive")
        X = self._validate(X)
        dist = np.full((X.shape[0], k), np.inf)
        ind = np.full((X.shape[0], k), -1, dtype=np.int64)
        for row, hits in enumerate(self._search(X, k=k)):
            ind[row, : len(hits)] = [h.id for h in hits]
            dist[row, : len(hits)] = [h.distance for h in hits]
        return (dist, ind) if return_distance else ind

    def radius_neighbors(self, X, radius=None, return_distance=True):
        r = self.radius if radius is None else radius
        X = self._validate(X)
        ind = np.empty(X.shape[0], dtype=object)
        dist = np.empty(X.shape[0], dtype=object)
        for row, hits in enumerate(self._search(X, radius=r)):
            ind[row] = np.array([h.id for h in hits], dtype=np.int64)
            dist[row] = np.array([h.distance for h in hits], dtype=np.float64)
        return (dist, ind) if return_distance else ind

    def close(self) -> None:
        """Release worker threads and the temporary store."""
        if getattr(self, "store_", None) is not None:
            self.store_.close()
            del self.store_


__all__ = ["LSHNeighbors"]
