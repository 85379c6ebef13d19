"""scikit-learn compatible classifier around the two-branch network."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import read_checkpoint, save_checkpoint
from .data import Sample
from .exceptions import InputError
from .model import CLASS_NAMES, ArchitectureConfig, build
from .optim import Adam, AdamHyper
from .tensor import resolve_dtype
from .training import evaluate, predict_proba, run_epochs


def check_images(X, extent=None):
    """Validate a ``(N, H, W, 3)`` batch of images scaled to ``[0, 1]``."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[3] != 3:
        raise InputError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if extent is not None and X.shape[1:3] != (extent, extent):
        raise InputError(f"expected {extent}x{extent} images, got {X.shape[1]}x{X.shape[2]}")
    if X.shape[0] == 0:
        raise InputError("no images given")
    X = X.astype(np.float64, copy=False) if X.dtype.kind not in "f" else X
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise InputError("image values must be finite and lie in [0, 1]; apply ImagePreprocessor first")
    return X


class WeedNetClassifier(ClassifierMixin, BaseEstimator):
    """Two-branch (plain + dilated convolution) image classifier.

    Parameters
    ----------
    profile : {"paper", "tiny"}
        Input resolution: 227x227 or 128x128. Layer structure is identical.
    epochs, batch_size, learning_rate :
        Training schedule; defaults are 15 epochs of batch 2 at 1e-4.
    beta1, beta2, epsilon :
        Adam moment decay rates and denominator offset.
    init_seed, shuffle_seed : int
        Seeds for weight initialisation and per-epoch shuffling.
    precision : {"single", "double"}
        Parameter and activation storage type.
    max_steps : int or None
        Stop after this many optimizer steps.
    warm_start : bool
        Continue training the existing network on repeated ``fit`` calls.

    ``y`` may hold class indices 0..3 or the names broadleaf, grass, soil,
    soybean; predictions come back in the same form.
    """

    def __init__(self, profile="paper", epochs=15, batch_size=2, learning_rate=1e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, init_seed=0, shuffle_seed=0, precision="single", max_steps=None, warm_start=False):
        self.profile = profile
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.init_seed = init_seed
        self.shuffle_seed = shuffle_seed
        self.precision = precision
        self.max_steps = max_steps
        self.warm_start = warm_start

    def _encode(self, y):
        y = np.asarray(y)
        if y.dtype.kind in "US":
            classes = np.array(CLASS_NAMES)
            lookup = {name: i for i, name in enumerate(CLASS_NAMES)}
            try:
                return classes, np.array([lookup[v] for v in y])
            except KeyError as exc:
                raise InputError(f"unknown class name {exc.args[0]!r}") from None
        if y.dtype.kind not in "iu" or (y.size and (y.min() < 0 or y.max() >= len(CLASS_NAMES))):
            raise InputError(f"labels must be class names or integers in 0..{len(CLASS_NAMES) - 1}")
        return np.arange(len(CLASS_NAMES)), y.astype(np.int64)

    def _samples(self, X, y_idx):
        return [Sample(img, int(label)) for img, label in zip(X, y_idx)]

    def fit(self, X, y, validation_data=None, on_epoch=None):
        """Train on images ``X`` (N, H, W, 3) in [0, 1] with labels ``y``.

        ``validation_data=(X_val, y_val)`` adds per-epoch validation metrics to
        ``history_``.
        """
        config = ArchitectureConfig.from_profile(self.profile)
        X = check_images(X, config.input_extent)
        classes, y_idx = self._encode(y)
        if len(y_idx) != len(X):
            raise InputError(f"{len(X)} images but {len(y_idx)} labels")
        dtype = resolve_dtype(self.precision)
        hyper = AdamHyper(self.learning_rate, self.beta1, self.beta2, self.epsilon)
        if not (self.warm_start and hasattr(self, "graph_")):
            self.graph_ = build(config, self.init_seed, dtype=dtype)
            self.optimizer_ = Adam(self.graph_, hyper)
            self.history_ = None
            first_epoch = 0
        else:
            self.optimizer_.hyper = hyper
            first_epoch = len(self.history_.epochs) if self.history_ is not None else 0
        self.classes_ = classes

        val_part = None
        if validation_data is not None:
            X_val, y_val = validation_data
            X_val = check_images(X_val, config.input_extent)
            val_part = self._samples(X_val, self._encode(y_val)[1])

        history = run_epochs(self.graph_, self.optimizer_, self._samples(X.astype(dtype, copy=False), y_idx),
                             val_part, epochs=self.epochs, batch_size=self.batch_size,
                             shuffle_seed=self.shuffle_seed, max_steps=self.max_steps, on_epoch=on_epoch,
                             first_epoch=first_epoch)
        if self.history_ is None:
            self.history_ = history
        else:
            self.history_.epochs += history.epochs
            self.history_.step_losses += history.step_losses
        self.n_steps_ = self.optimizer_.state.t
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "graph_")
        X = check_images(X, self.graph_.input_shape[0])
        return predict_proba(self.graph_, X)

    def predict(self, X):
        # argmax picks the lowest index on ties
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def evaluate(self, X, y):
        """Mean cross-entropy, accuracy and confusion matrix on ``(X, y)``."""
        check_is_fitted(self, "graph_")
        X = check_images(X, self.graph_.input_shape[0])
        return evaluate(self.graph_, self._samples(X, self._encode(y)[1]))

    def save(self, path):
        check_is_fitted(self, "graph_")
        save_checkpoint(self.graph_, path, self.optimizer_.state, self.optimizer_.hyper)

    @classmethod
    def load(cls, path, **params):
        ckpt = read_checkpoint(path)
        hyper = ckpt.adam_hyper or AdamHyper()
        precision = "single" if ckpt.graph.dtype == np.float32 else "double"
        est = cls(profile=ckpt.graph.config.profile, learning_rate=hyper.learning_rate, beta1=hyper.beta1,
                  beta2=hyper.beta2, epsilon=hyper.epsilon, precision=precision, **params)
        est.graph_ = ckpt.graph
        est.optimizer_ = Adam(ckpt.graph, hyper, ckpt.adam_state)
        est.classes_ = np.arange(len(CLASS_NAMES))
        est.history_ = None
        est.n_steps_ = ckpt.step
        return est
