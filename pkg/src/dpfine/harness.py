"""End-to-end experiment driver.

Pretrains non-privately on the public split, then fine-tunes privately
under a target (epsilon, delta) with a chosen layer-selection strategy.
The privacy order is fixed: the noise multiplier is calibrated from
(epsilon, delta, q, T) alone, and the trainable mask is built from the
architecture, before any private example contributes a gradient.

Every run is a deterministic function of (config, seed): per-cell seeds
are stable hashes of (base seed, strategy, epsilon), the data-order and
noise streams are separate children of the cell seed, and augmentation is
keyed by stable integer identifiers.
"""

import hashlib
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from dpfine import accountant, checkpoint, data, finetune, nn, optim
from dpfine.errors import ConfigError, DpfineError, NumericFailure
from dpfine.report import RunRecord, RunReport, emit

_BOOL = ("0", "1")


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; unknown keys are rejected at parse."""

    dataset: str = "synthetic"
    classes: int = 10
    image_dim: int = 8
    n_public: int = 2048
    n_private: int = 512
    n_test: int = 512
    synthetic_noise: float = 0.12
    public_images: str = ""
    public_labels: str = ""
    private_images: str = ""
    private_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    public_csv: str = ""
    private_csv: str = ""
    test_csv: str = ""
    model_width: int = 8
    model_hidden: int = 48
    weight_standardize: int = 0
    strategies: str = "whole,last,first-last"
    epsilon_grid: str = "1,2,4,8"
    delta: float = 1e-5
    sampling_rate: float = 0.125
    steps: int = 500
    epochs: float = 0.0
    clip_norm: float = 1.0
    learning_rate: float = 0.5
    augment_multiplicity: int = 2
    augment_ops: str = "horizontal_flip,pad_and_crop"
    augment_pad: int = 1
    ema_decay: float = 0.999
    seed: int = 1234
    out_dir: str = "runs/sweep"
    checkpoint: str = ""
    head_reinit: str = "auto"
    pretrain_epochs: int = 5
    pretrain_batch_size: int = 64
    pretrain_lr: float = 0.2
    pretrain_holdout_fraction: float = 0.125
    nondeterministic_noise: int = 0

    def validate(self):
        if self.dataset not in ("synthetic", "idx", "csv"):
            raise ConfigError(f"dataset must be synthetic | idx | csv, got {self.dataset!r}")
        if not 0 <= self.sampling_rate <= 1:
            raise ConfigError(f"sampling_rate must be in [0, 1], got {self.sampling_rate}")
        if self.steps <= 0 and self.epochs <= 0:
            raise ConfigError("one of steps or epochs must be positive")
        if self.epochs > 0 and self.sampling_rate == 0:
            raise ConfigError("epochs requires a positive sampling_rate")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must be in (0, 1)")
        if self.head_reinit not in ("auto", "keep", "zeros", "normal"):
            raise ConfigError("head_reinit must be auto | keep | zeros | normal")
        if self.augment_multiplicity < 1:
            raise ConfigError("augment_multiplicity must be >= 1")
        for e in self.epsilon_values():
            if not e > 0:
                raise ConfigError(f"epsilon values must be positive, got {e}")
        self.strategy_list()
        return self

    def epsilon_values(self):
        out = []
        for tok in self.epsilon_grid.split(","):
            tok = tok.strip()
            if tok:
                out.append(math.inf if tok == "inf" else float(tok))
        if not out:
            raise ConfigError("epsilon_grid is empty")
        return out

    def strategy_list(self):
        toks = [t.strip() for t in self.strategies.split(",") if t.strip()]
        if not toks:
            raise ConfigError("strategies is empty")
        return [finetune.parse_strategy(t) for t in toks]

    def augment_spec(self):
        ops = tuple(t.strip() for t in self.augment_ops.split(",") if t.strip())
        return data.AugmentSpec(self.augment_multiplicity, ops, self.augment_pad)

    def num_steps(self):
        """T, derived from epochs as E/q when steps is not set directly."""
        if self.epochs > 0:
            return max(1, round(self.epochs / self.sampling_rate))
        return self.steps


_FIELD_TYPES = {
    f.name: f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}[f.type]
    for f in fields(ExperimentConfig)
}


def parse_config_text(text, path="<config>"):
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(_FIELD_TYPES))
            )
        try:
            overrides[key] = _FIELD_TYPES[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return ExperimentConfig(**overrides).validate()


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return parse_config_text(f.read(), path)


def cell_seed(base_seed, strategy_label, epsilon):
    """Stable per-cell seed: sha256 of the cell identity, not Python hash."""
    ident = f"{base_seed}:{strategy_label}:{epsilon!r}".encode()
    return int.from_bytes(hashlib.sha256(ident).digest()[:8], "big")


def load_datasets(config):
    """Returns (public, private, test) datasets per the config."""
    if config.dataset == "synthetic":
        return data.make_synthetic_transfer_task(
            config.seed,
            config.n_public,
            config.n_private,
            config.classes,
            config.image_dim,
            config.n_test,
            config.synthetic_noise,
        )
    if config.dataset == "idx":
        for key in ("public_images", "public_labels", "private_images", "private_labels",
                    "test_images", "test_labels"):
            if not getattr(config, key):
                raise ConfigError(f"dataset=idx requires {key}")
        public = data.load_idx(config.public_images, config.public_labels,
                               "idx-public", "public_pretrain", config.classes)
        private = data.load_idx(config.private_images, config.private_labels,
                                "idx-private", "private_finetune", config.classes)
        test = data.load_idx(config.test_images, config.test_labels,
                             "idx-test", "test", config.classes)
        return public, private, test
    for key in ("public_csv", "private_csv", "test_csv"):
        if not getattr(config, key):
            raise ConfigError(f"dataset=csv requires {key}")
    public = data.load_csv(config.public_csv, None, "csv-public", "public_pretrain",
                           config.classes)
    private = data.load_csv(config.private_csv, None, "csv-private", "private_finetune",
                            config.classes)
    test = data.load_csv(config.test_csv, None, "csv-test", "test", config.classes)
    return public, private, test


def build_model(config, input_shape):
    return nn.build_small_cnn(
        input_shape,
        classes=config.classes,
        width=config.model_width,
        hidden=config.model_hidden,
        seed=config.seed,
        weight_standardize=bool(config.weight_standardize),
    )


def pretrain(config, public=None):
    """Non-private SGD on the public split; returns (model, eval_accuracy).

    A deterministic holdout slice of the public split provides the
    public-task evaluation accuracy.
    """
    if public is None:
        public, _, _ = load_datasets(config)
    holdout = max(1, int(len(public) * config.pretrain_holdout_fraction))
    train_x, train_y = public.images[:-holdout], public.labels[:-holdout]
    eval_x, eval_y = public.images[-holdout:], public.labels[-holdout:]

    model = build_model(config, public.images.shape[1:])
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    b = config.pretrain_batch_size
    step = 0
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(train_x))
        for i in range(0, len(order), b):
            idx = order[i : i + b]
            rows = nn.per_example_gradients(model, train_x[idx], train_y[idx])
            grad = rows.mean(axis=0)
            if not np.all(np.isfinite(grad)):
                raise NumericFailure(f"pretrain diverged (non-finite loss) at step {step}")
            theta = nn.flatten_params(model)
            model = nn.set_params(model, theta - config.pretrain_lr * grad)
            step += 1
    return model, nn.accuracy(model, eval_x, eval_y)


def pretrain_to_checkpoint(config, path=None):
    public, _, _ = load_datasets(config)
    model, acc = pretrain(config, public)
    path = path or os.path.join(config.out_dir, "pretrain.ckpt")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    checkpoint.save(model, path, meta={"pretrain_accuracy": repr(acc),
                                       "seed": str(config.seed)})
    return path, acc


def _prepare_head(config, model, classes, rng):
    head = model.parameterized_layers[-1]
    model_classes = head.params["bias"].shape[0]
    if model_classes != classes:
        return finetune.resize_head(model, classes, rng,
                                    "zeros" if config.head_reinit in ("auto", "keep", "zeros")
                                    else "normal")
    if config.head_reinit in ("auto", "keep"):
        return model
    return finetune.reinit_head(model, rng, config.head_reinit)


def finetune_dp(config, base_model, datasets, strategy, epsilon_target, seed=None,
                capture=None):
    """One private fine-tuning run; returns a RunRecord with its trace.

    epsilon_target = inf selects the non-private debug mode: sigma = 0,
    clipping disabled, accountant bypassed and the record marked
    NON-PRIVATE. ``capture``, if a dict, receives the final model and EMA
    state (for tests and debugging).
    """
    _, private, test = datasets
    seed = config.seed if seed is None else seed
    q = config.sampling_rate
    steps = config.num_steps()
    non_private = math.isinf(epsilon_target)

    # Privacy order: sigma, the mask and all hyperparameters are fixed
    # before any private example is touched.
    if non_private:
        sigma, clip_norm = 0.0, math.inf
        eps_trace = np.full(steps, math.inf)
        realized = math.inf
    else:
        cal = accountant.calibrate_sigma(epsilon_target, config.delta, q, steps)
        sigma, clip_norm = cal.sigma, config.clip_norm
        spec = accountant.PrivacySpec(
            epsilon_target, config.delta, q, sigma, steps, len(private)
        )
        eps_trace = accountant.trace_epsilon(spec)
        realized = cal.epsilon

    root = np.random.SeedSequence(seed)
    head_ss, data_ss, noise_ss, augment_ss = root.spawn(4)
    model = _prepare_head(config, base_model.copy(), private.num_classes,
                          np.random.default_rng(head_ss))
    mask = finetune.select_trainable(model, strategy)

    data_rng = np.random.default_rng(data_ss)
    noise_seed = int(noise_ss.generate_state(1)[0])
    if config.nondeterministic_noise:
        noise_rng = np.random.default_rng()
    else:
        noise_rng = np.random.default_rng(noise_seed)
    augment_seed = int(augment_ss.generate_state(1)[0])

    clip_cfg = optim.ClipConfig(clip_norm)
    noise_cfg = optim.NoiseConfig(sigma, noise_seed)
    step_cfg = optim.StepConfig(
        config.learning_rate, q * len(private), config.augment_multiplicity
    )
    spec_aug = config.augment_spec()

    ema = optim.ema_init(model, config.ema_decay)
    trace = []
    start = time.perf_counter()
    for t in range(steps):
        idx = optim.poisson_sample(len(private), q, data_rng)
        x_aug = data.augment_batch(private.images[idx], spec_aug, idx, t, augment_seed)
        model, diag = optim.dp_sgd_step(
            model, x_aug, private.labels[idx], mask, clip_cfg, noise_cfg, step_cfg, noise_rng
        )
        ema = optim.ema_update(ema, nn.flatten_params(model))
        trace.append((t + 1, float(eps_trace[t]), diag["mean_loss"]))
    wall = time.perf_counter() - start

    acc_raw = nn.accuracy(model, test.images, test.labels)
    acc_ema = nn.accuracy(optim.ema_model(ema, model), test.images, test.labels)
    if capture is not None:
        capture["model"] = model
        capture["ema"] = ema
        capture["mask"] = mask
    return RunRecord(
        strategy=strategy.label,
        epsilon_target=epsilon_target,
        epsilon_realized=realized,
        delta=config.delta,
        sigma=sigma,
        trainable_params=finetune.effective_dimension(mask),
        total_params=model.num_params,
        accuracy_ema=acc_ema,
        accuracy_raw=acc_raw,
        steps=steps,
        sampling_rate=q,
        clip_norm=clip_norm if not non_private else math.inf,
        seed=seed,
        non_private=int(non_private),
        wall_time_s=wall,
        trace=trace,
    )


def sweep(config, out_dir=None):
    """Strategies x epsilon grid; returns the RunReport after emitting it.

    Failed cells are retained with status=failed:<reason>; completed cells
    are unaffected.
    """
    out_dir = out_dir or config.out_dir
    datasets = load_datasets(config)
    public, private, _ = datasets

    if config.checkpoint:
        base_model, _ = checkpoint.load(config.checkpoint)
        pre_acc = None
    else:
        base_model, pre_acc = pretrain(config, public)
        os.makedirs(out_dir, exist_ok=True)
        checkpoint.save(base_model, os.path.join(out_dir, "pretrain.ckpt"),
                        meta={"seed": str(config.seed)})

    report = RunReport(dataset=private.name, base_seed=config.seed,
                       pretrain_accuracy=pre_acc)
    for strategy in config.strategy_list():
        for eps in config.epsilon_values():
            seed = cell_seed(config.seed, strategy.label, eps)
            try:
                rec = finetune_dp(config, base_model, datasets, strategy, eps, seed)
            except DpfineError as exc:
                rec = RunRecord(
                    strategy=strategy.label,
                    epsilon_target=eps,
                    epsilon_realized=math.nan,
                    delta=config.delta,
                    sigma=math.nan,
                    trainable_params=0,
                    total_params=base_model.num_params,
                    accuracy_ema=math.nan,
                    accuracy_raw=math.nan,
                    steps=config.num_steps(),
                    sampling_rate=config.sampling_rate,
                    clip_norm=config.clip_norm,
                    seed=seed,
                    status=f"failed:{type(exc).__name__}:{exc}",
                )
            report.records.append(rec)
    emit(report, out_dir)
    return report
