"""Hierarchical model interface and dataset containers."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from ..core import LOG_2PI, NumericalError, as_generator


@dataclass
class SubjectData:
    """Trials of one subject, stored column-wise (one array per payload column)."""

    subject_id: str
    trials: dict[str, np.ndarray]

    @property
    def n_trials(self) -> int:
        return len(next(iter(self.trials.values()))) if self.trials else 0


@dataclass
class Dataset:
    subjects: list[SubjectData]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.subjects:
            raise ValueError("dataset needs at least one subject")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def S(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return sum(s.n_trials for s in self.subjects)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.subjects[i] for i in idx])


def ragged_offsets(dataset: Dataset) -> np.ndarray:
    counts = np.array([s.n_trials for s in dataset.subjects], dtype=np.int64)
    return np.concatenate([[0], np.cumsum(counts)])


def concat_column(dataset: Dataset, name: str, dtype=float) -> np.ndarray:
    return np.concatenate([np.asarray(s.trials[name], dtype=dtype) for s in dataset.subjects])


class HierarchicalModel(ABC):
    """A model ``p(y_j | alpha_j, theta) p(alpha_j | theta) p(theta)``.

    ``theta`` lives on an unconstrained scale; :meth:`log_theta_prior` includes
    the log-Jacobian of that transform. Random effects have a Gaussian
    population law ``N(mean(theta), L L^T)`` exposed by :meth:`re_prior_gaussian`.
    Observation densities are evaluated for batches of particles with
    :meth:`log_obs_batch`, which is where kernels do their work.
    """

    name: str = "model"
    theta_names: tuple[str, ...] = ()
    alpha_names: tuple[str, ...] = ()
    payload_columns: tuple[str, ...] = ()

    @property
    def d_theta(self) -> int:
        return len(self.theta_names)

    @property
    def d_alpha(self) -> int:
        return len(self.alpha_names)

    # -- priors -------------------------------------------------------------

    @abstractmethod
    def log_theta_prior(self, theta: np.ndarray) -> float: ...

    @abstractmethod
    def sample_theta_prior(self, n: int, rng) -> np.ndarray: ...

    @abstractmethod
    def re_prior_gaussian(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(mean, lower Cholesky factor)`` of ``p(alpha_j | theta)``."""

    def log_re_prior(self, alpha: np.ndarray, theta: np.ndarray) -> np.ndarray:
        mean, chol = self._checked_re_prior(theta)
        alpha = np.asarray(alpha, dtype=float)
        flat = alpha.reshape(-1, self.d_alpha)
        u = np.linalg.solve(chol, (flat - mean).T).T
        out = -0.5 * np.sum(u * u, axis=1) - np.sum(np.log(np.diag(chol))) - 0.5 * self.d_alpha * LOG_2PI
        return out.reshape(alpha.shape[:-1]) if alpha.ndim > 1 else out[0]

    def sample_re(self, theta: np.ndarray, n: int, rng) -> np.ndarray:
        mean, chol = self._checked_re_prior(theta)
        z = as_generator(rng).standard_normal((n, self.d_alpha))
        return mean + z @ chol.T

    def _checked_re_prior(self, theta):
        mean, chol = self.re_prior_gaussian(np.asarray(theta, dtype=float))
        diag = np.diag(chol)
        if not (np.all(np.isfinite(chol)) and np.all(diag > 1e-150)):
            raise NumericalError("singular random-effects covariance")
        return mean, chol

    # -- observations -------------------------------------------------------

    @abstractmethod
    def prepare(self, dataset: Dataset):
        """Flatten a dataset into the arrays :meth:`log_obs_batch` consumes."""

    def prepared(self, dataset: Dataset):
        key = self.data_key
        if key not in dataset._cache:
            dataset._cache[key] = self.prepare(dataset)
        return dataset._cache[key]

    @property
    def data_key(self) -> str:
        return type(self).__name__

    @abstractmethod
    def log_obs_batch(self, data, subj: np.ndarray, alpha: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Log ``p(y_j | alpha, theta)`` for ``alpha`` of shape ``(G, N, d_alpha)``.

        Row ``g`` belongs to subject ``subj[g]``; returns shape ``(G, N)``.
        """

    def log_obs(self, subject: SubjectData, alpha: np.ndarray, theta: np.ndarray):
        """Log conditional density of one subject's trials at one or more ``alpha``."""
        data = self.prepare(Dataset([subject]))
        alpha = np.asarray(alpha, dtype=float)
        batch = alpha.reshape(1, -1, self.d_alpha)
        out = self.log_obs_batch(data, np.zeros(1, dtype=np.int64), batch, np.asarray(theta, float))[0]
        return out if alpha.ndim > 1 else float(out[0])

    def validate_subject(self, subject: SubjectData) -> None:
        missing = [c for c in self.payload_columns if c not in subject.trials]
        if missing:
            raise ValueError(f"subject {subject.subject_id}: missing columns {missing}")

    # -- simulation ---------------------------------------------------------

    @abstractmethod
    def simulate_subject(self, subject_id: str, alpha: np.ndarray, theta: np.ndarray,
                         T: int, gen: np.random.Generator) -> SubjectData: ...

    def simulate(self, theta, S: int, T: int, rng) -> Dataset:
        """Draw ``alpha_j ~ p(alpha | theta)`` and then ``T`` trials per subject."""
        if S < 1 or T < 1:
            raise ValueError("S and T must be at least 1")
        theta = np.asarray(theta, dtype=float)
        gen = as_generator(rng)
        alphas = self.sample_re(theta, S, gen)
        subjects = [
            self.simulate_subject(f"s{j + 1:03d}", alphas[j], theta, T, gen) for j in range(S)
        ]
        ds = Dataset(subjects)
        ds._cache["true_alpha"] = alphas
        return ds

    def unpack(self, theta: np.ndarray) -> dict:
        """Natural-scale parameters keyed by name."""
        return dict(zip(self.theta_names, np.asarray(theta, dtype=float)))

    def exact_log_likelihood(self, dataset: Dataset, theta) -> float:
        raise NotImplementedError(f"{self.name} has no closed-form likelihood")

    def describe(self) -> dict:
        return {"model": self.name}
