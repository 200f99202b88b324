"""scikit-learn style estimators wrapping the episodic machinery.

Three levels of the pipeline map naturally onto the fit/predict protocol:

* :class:`PrototypeClassifier` - the vanilla nearest-prototype classifier;
  ``fit`` averages each class's embeddings, ``predict`` softmaxes negated
  distances.
* :class:`DiffusionPrototypeClassifier` - same protocol, but ``fit`` refines
  the prototypes with a trained denoiser via diffusion sampling.
* :class:`DiffusionPrototypeMetaLearner` - ``fit`` meta-trains the denoiser
  on a labeled embedding collection; ``make_classifier`` hands out refined
  per-episode classifiers, and ``score`` runs episodic evaluation.

All hyperparameters are plain constructor attributes, so ``get_params`` /
``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .data import EmbeddingDataset
from .diffusion import SamplerConfig, sample_prototypes
from .denoiser import COND_LEARNED, EpisodeDenoiser
from .harness import meta_test
from .numerics import RngStream
from .overfit import OverfitConfig
from .protonet import Metric, PrototypeSet, classify
from .training import TrainConfig, TrainState, load_checkpoint, meta_train


def _validate_embeddings(X, y):
    X, y = check_X_y(X, y, dtype=(np.float32, np.float64))
    classes, inverse = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least 2 classes")
    return X.astype(np.float32), y, classes, inverse


def _class_means(X, inverse, n_classes):
    protos = np.zeros((n_classes, X.shape[1]), dtype=np.float32)
    for c in range(n_classes):
        protos[c] = X[inverse == c].mean(axis=0)
    return protos


class PrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-prototype classifier with a distance softmax."""

    def __init__(self, metric: str = "sqeuclidean", temperature: float = 10.0):
        self.metric = metric
        self.temperature = temperature

    def fit(self, X, y):
        X, y, classes, inverse = _validate_embeddings(X, y)
        self.classes_ = classes
        self.prototypes_ = PrototypeSet(_class_means(X, inverse, classes.size))
        return self

    def _check_fitted(self):
        if not hasattr(self, "prototypes_"):
            raise NotFittedError("call fit before predict")

    def predict_proba(self, X):
        self._check_fitted()
        X = check_array(X, dtype=(np.float32, np.float64)).astype(np.float32)
        return classify(X, self.prototypes_, Metric(self.metric, self.temperature))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class DiffusionPrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Prototype classifier whose prototypes are refined by a trained denoiser.

    ``model`` is a TrainState or a checkpoint path. The support set passed to
    ``fit`` plays the role of one episode; its class means are pushed through
    the reverse diffusion process before classification.
    """

    def __init__(self, model=None, mode: str = "direct", stride: int = 10,
                 mc_samples: int = 1, aggregate: str = "mean_probs",
                 sample_seed: int = 0, metric: str | None = None,
                 temperature: float | None = None):
        self.model = model
        self.mode = mode
        self.stride = stride
        self.mc_samples = mc_samples
        self.aggregate = aggregate
        self.sample_seed = sample_seed
        self.metric = metric
        self.temperature = temperature

    def _state(self) -> TrainState:
        if self.model is None:
            raise ValueError("model is required: pass a TrainState or a checkpoint path")
        if isinstance(self.model, TrainState):
            return self.model
        return load_checkpoint(self.model)

    def _metric(self, state: TrainState) -> Metric:
        variant = self.metric or state.config.metric_variant
        temperature = self.temperature if self.temperature is not None else state.config.temperature
        return Metric(variant, temperature)

    def fit(self, X, y):
        X, y, classes, inverse = _validate_embeddings(X, y)
        state = self._state()
        if X.shape[1] != state.model.config.proto_dim:
            raise ValueError(
                f"embedding dim {X.shape[1]} does not match the model's {state.model.config.proto_dim}"
            )
        vanilla = PrototypeSet(_class_means(X, inverse, classes.size))
        class_ids = classes if state.config.cond_mode == COND_LEARNED else None
        sampler = SamplerConfig(self.mode, self.stride, self.mc_samples, self.aggregate)
        protos, _ = sample_prototypes(
            EpisodeDenoiser(state.model, class_ids), vanilla, state.schedule, sampler,
            RngStream(self.sample_seed).child("estimator"), residual=state.config.residual,
        )
        self.classes_ = classes
        self.prototypes_ = protos
        self.metric_ = self._metric(state)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "prototypes_"):
            raise NotFittedError("call fit before predict")
        X = check_array(X, dtype=(np.float32, np.float64)).astype(np.float32)
        return classify(X, self.prototypes_, self.metric_)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class DiffusionPrototypeMetaLearner(BaseEstimator):
    """Meta-trains the prototype denoiser on a labeled embedding collection."""

    def __init__(self, n_way: int = 5, k_shot: int = 1, q_query: int = 15,
                 total_episodes: int = 10_000, task_batch_size: int = 4,
                 learning_rate: float = 1e-3, momentum: float = 0.9,
                 loss_weight: float = 1.0, timesteps: int = 100,
                 residual: bool = True, cond_mode: str = "vanilla_prototype",
                 metric: str = "sqeuclidean", temperature: float = 10.0,
                 denoiser_layers: int = 2, denoiser_dim: int = 64,
                 denoiser_heads: int = 4, denoiser_mlp: int = 128,
                 overfit_learning_rate: float = 0.5, overfit_max_iters: int = 200,
                 overfit_tolerance: float = 1e-3, seed: int = 0):
        self.n_way = n_way
        self.k_shot = k_shot
        self.q_query = q_query
        self.total_episodes = total_episodes
        self.task_batch_size = task_batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.loss_weight = loss_weight
        self.timesteps = timesteps
        self.residual = residual
        self.cond_mode = cond_mode
        self.metric = metric
        self.temperature = temperature
        self.denoiser_layers = denoiser_layers
        self.denoiser_dim = denoiser_dim
        self.denoiser_heads = denoiser_heads
        self.denoiser_mlp = denoiser_mlp
        self.overfit_learning_rate = overfit_learning_rate
        self.overfit_max_iters = overfit_max_iters
        self.overfit_tolerance = overfit_tolerance
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            n_way=self.n_way, k_shot=self.k_shot, q_query=self.q_query,
            loss_weight=self.loss_weight, learning_rate=self.learning_rate,
            momentum=self.momentum, task_batch_size=self.task_batch_size,
            total_episodes=self.total_episodes, seed=self.seed,
            timesteps=self.timesteps, residual=self.residual,
            metric_variant=self.metric, temperature=self.temperature,
            overfit=OverfitConfig(
                learning_rate=self.overfit_learning_rate,
                max_iters=self.overfit_max_iters,
                loss_tolerance=self.overfit_tolerance,
            ),
            denoiser_layers=self.denoiser_layers, denoiser_dim=self.denoiser_dim,
            denoiser_heads=self.denoiser_heads, denoiser_mlp=self.denoiser_mlp,
            cond_mode=self.cond_mode,
        )

    @staticmethod
    def _dataset(X, y) -> EmbeddingDataset:
        X, y = check_X_y(X, y, dtype=(np.float32, np.float64))
        return EmbeddingDataset(X.shape[1], X.astype(np.float32), y.astype(np.int64))

    def fit(self, X, y):
        dataset = self._dataset(X, y)
        need = self.k_shot + self.q_query
        for cls in dataset.classes:
            if dataset.class_rows(cls).size < need:
                raise ValueError(f"class {cls} has fewer than k_shot+q_query={need} examples")
        self.state_ = meta_train(dataset, self._train_config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("call fit before using the meta-learner")

    def make_classifier(self, **sampler_overrides) -> DiffusionPrototypeClassifier:
        """A refined per-episode classifier bound to the trained denoiser."""
        self._check_fitted()
        return DiffusionPrototypeClassifier(model=self.state_, **sampler_overrides)

    def score(self, X, y, n_tasks: int = 100, seed: int = 0,
              sampler: SamplerConfig | None = None) -> float:
        """Mean episodic accuracy over tasks sampled from (X, y)."""
        self._check_fitted()
        dataset = self._dataset(X, y)
        report = meta_test(
            self.state_, dataset, self.n_way, self.k_shot, self.q_query,
            n_tasks, sampler or SamplerConfig(), seed,
        )
        return report.mean
