"""Experiment harness: configs, training loops, sweeps, and metrics files.

A run is fully described by an :class:`ExperimentConfig`; identical configs
(including the seed) produce byte-identical output files.  Wall-clock times
are therefore kept out of the metrics CSV and written to a separate
``timing.txt``, the only non-deterministic artifact.

Run directory layout::

    metrics.csv        one row per epoch (see METRIC_COLUMNS)
    metadata.json      config + resolved facts (split/init hashes, sizes)
    timing.txt         per-epoch wall seconds (excluded from determinism)
    checkpoint.nsdw    final dense-layer parameters (see nsdnet.nn)
    masks_final.csv    final per-class masks, hex kept-bitmaps
    mask_trace.csv     one record per mask refresh (epoch,layer,class,hex)
    confusion_<mode>.csv

Error fractions in sweep tables are 1 - accuracy.

Evaluation reports both ``labeled`` (mask picked by the true label) and
``predicted`` (mask picked by the argmax of an unmasked pass) accuracies for
per-class-masked networks, because picking a mask at test time requires a
class identity that true test labels cannot legitimately provide; see
README for the discussion.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datasets as ds
from .datasets import Dataset, SplitSpec
from .ndcore import Rng, derive
from .nn import (
    DenseLayer,
    Network,
    ReluLayer,
    SgdConfig,
    StandardDropoutLayer,
    save_checkpoint,
    sgd_step,
    softmax_xent,
)
from .nsdropout import (
    MaskSet,
    NsDropoutLayer,
    decode_mask_hex,
    encode_mask_hex,
    capture_reference,
    forward_with_mode,
    ns_layers,
)

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "dropout", "nsdropout")
REFRESH_POLICIES = ("per-epoch", "per-batch", "never")
DATA_ROOT_ENV = "NSD_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient (CLI exit code 2)."""


@dataclass
class ExperimentConfig:
    """Declarative description of one training run.

    ``p`` gives drop fractions per mask slot: slot 0 masks the network
    input, slot i masks the output of hidden activation i.  ``None`` picks
    the documented defaults (input 0.5 -- 0.2 for fashion-mnist -- and 0.2
    for hidden slots) for the dropout/nsdropout regularizers.
    """

    dataset: str = "synthetic"
    data_root: str | None = None
    dataset_options: dict = field(default_factory=dict)
    arch: tuple = (784, 128, 128, 128, 10)
    regularizer: str = "none"
    p: tuple | None = None
    budget: int = 10_000
    train_frac: float = 0.8
    subsample_n: int | None = None
    subsample_stratified: bool | None = None
    epochs: int = 100
    batch_size: int | None = None
    learning_rate: float = 0.02
    lr_multiplier: float = 1.0
    momentum: float = 0.9
    l2_decay: float = 0.0
    anneal: float | None = None
    refresh: str = "per-epoch"
    eval_modes: tuple = ("labeled", "predicted")
    signed_deviation: bool = False
    zca: bool = False
    seed: int = 0
    output_dir: str | None = None
    trace_masks: bool = True

    def __post_init__(self):
        self.arch = tuple(int(v) for v in self.arch)
        if self.p is not None:
            self.p = tuple(float(v) for v in self.p)
        self.eval_modes = tuple(self.eval_modes)
        self.dataset_options = dict(self.dataset_options)

    def validate(self):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, "
                              f"got {self.regularizer!r}")
        if len(self.arch) < 2 or any(v < 1 for v in self.arch):
            raise ConfigError(f"bad architecture {self.arch}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.budget < 2:
            raise ConfigError("budget must be >= 2")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must be in (0,1); the unseen "
                              "validation split is mandatory")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 or null for full batch")
        if self.refresh not in REFRESH_POLICIES:
            raise ConfigError(f"refresh must be one of {REFRESH_POLICIES}")
        for mode in self.eval_modes:
            if mode not in ("labeled", "predicted", "union", "intersection",
                            "off"):
                raise ConfigError(f"unknown eval mode {mode!r}")
        if not self.eval_modes:
            raise ConfigError("eval_modes must not be empty")
        if self.p is not None:
            if len(self.p) > self.mask_slots():
                raise ConfigError(
                    f"{len(self.p)} p values for {self.mask_slots()} mask "
                    f"slots (input + one per hidden layer)")
            for v in self.p:
                if not 0.0 <= v <= 1.0:
                    raise ConfigError(f"p values must be in [0,1], got {v}")
        if self.lr_multiplier <= 0:
            raise ConfigError("lr_multiplier must be > 0")
        try:
            self.sgd_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    def mask_slots(self):
        return len(self.arch) - 1  # input slot + one per hidden layer

    def p_schedule(self):
        """Resolved per-slot drop fractions (zeros for regularizer none)."""
        slots = self.mask_slots()
        if self.regularizer == "none":
            return (0.0,) * slots
        if self.p is not None:
            return tuple(self.p) + (0.0,) * (slots - len(self.p))
        input_p = 0.2 if self.dataset.startswith("fashion") else 0.5
        return (input_p,) + (0.2,) * (slots - 1)

    def sgd_config(self):
        lr = self.learning_rate
        if self.regularizer == "nsdropout":
            lr *= self.lr_multiplier
        return SgdConfig(learning_rate=lr, momentum=self.momentum,
                         l2_decay=self.l2_decay, anneal=self.anneal)

    def to_dict(self):
        return asdict(self)


_CONFIG_FIELDS = {f for f in ExperimentConfig.__dataclass_fields__}


def config_from_dict(data):
    unknown = set(data) - _CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg.validate()


def config_from_file(path):
    """Load a JSON config file (keys = ExperimentConfig fields)."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config_from_dict(data)


def load_dataset(config):
    """Resolve (training source, test set) for a config.

    Real datasets are looked up under data_root (or $NSD_DATA_ROOT);
    ``synthetic`` and ``toy`` are deterministic built-in generators keyed on
    the run seed.
    """
    name = config.dataset
    opts = config.dataset_options
    if name == "synthetic":
        return ds.make_synthetic_images(
            train_n=int(opts.get("train_n", 12_000)),
            test_n=int(opts.get("test_n", 10_000)),
            dim=int(opts.get("dim", 784)),
            class_count=int(opts.get("class_count", 10)),
            noise=float(opts.get("noise", 0.5)),
            seed=config.seed)
    if name == "toy":
        return ds.make_toy_blobs(
            train_n=int(opts.get("train_n", 200)),
            test_n=int(opts.get("test_n", 200)),
            seed=config.seed)
    root = config.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(
            f"dataset {name!r} needs --data-root or ${DATA_ROOT_ENV}")
    root = Path(root)

    def find(*candidates):
        for rel in candidates:
            for suffix in ("", ".gz"):
                path = root / (rel + suffix)
                if path.exists():
                    return path
        raise ConfigError(f"missing dataset file under {root}: "
                          f"{candidates[0]}")

    if name in ("mnist", "fashion-mnist"):
        sub = "mnist" if name == "mnist" else "fashion-mnist"
        train = ds.load_idx(
            find(f"{sub}/train-images-idx3-ubyte", "train-images-idx3-ubyte"),
            find(f"{sub}/train-labels-idx1-ubyte", "train-labels-idx1-ubyte"),
            name=name, class_count=10)
        test = ds.load_idx(
            find(f"{sub}/t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte"),
            find(f"{sub}/t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"),
            name=f"{name}:test", class_count=10)
        return train, test
    if name == "cifar10":
        batches = [find(f"cifar-10-batches-bin/data_batch_{i}.bin",
                        f"data_batch_{i}.bin") for i in range(1, 6)]
        test_path = find("cifar-10-batches-bin/test_batch.bin",
                         "test_batch.bin")
        return (ds.load_cifar10(batches, name=name),
                ds.load_cifar10([test_path], name=f"{name}:test"))
    raise ConfigError(f"unknown dataset {name!r}")


def build_network(config, input_dim, class_count):
    """Network for a config: dense/relu stack plus regularizer layers.

    Mask slots with p == 0 get no layer at all, so a zero schedule builds
    exactly the baseline network.  Dense-layer initialization consumes its
    own RNG stream, making initial weights identical across regularizers
    for one seed.
    """
    arch = config.arch
    if arch[0] != input_dim:
        raise ConfigError(f"arch input width {arch[0]} != data dim "
                          f"{input_dim}")
    if arch[-1] != class_count:
        raise ConfigError(f"arch output width {arch[-1]} != class count "
                          f"{class_count}")
    schedule = config.p_schedule()
    init_rng = Rng(derive(config.seed, "init"))
    drop_rng = Rng(derive(config.seed, "dropout"))

    def mask_layer(width, p):
        try:
            if config.regularizer == "dropout":
                return StandardDropoutLayer(p, drop_rng)
            return NsDropoutLayer(width, class_count, p,
                                  signed=config.signed_deviation)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    layers = []
    if schedule[0] > 0.0:
        layers.append(mask_layer(arch[0], schedule[0]))
    for i in range(len(arch) - 1):
        layers.append(DenseLayer(arch[i], arch[i + 1], init_rng))
        if i < len(arch) - 2:
            layers.append(ReluLayer())
            if schedule[i + 1] > 0.0:
                layers.append(mask_layer(arch[i + 1], schedule[i + 1]))
    return Network(layers)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    unseen_val_acc: float
    test_acc: dict
    mask_churn: float | None
    wall_time: float


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list
    network: Network
    out_dir: Path | None
    trace: list           # (epoch, layer_index, class, kept_hex)
    metadata: dict


def metric_columns(eval_modes):
    return (["epoch", "train_loss", "train_acc", "unseen_val_acc"]
            + [f"test_acc_{m}" for m in eval_modes]
            + ["mask_churn_mean"])


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_csv_lines(records, eval_modes):
    lines = [",".join(metric_columns(eval_modes))]
    for r in records:
        row = [_fmt(r.epoch), _fmt(r.train_loss), _fmt(r.train_acc),
               _fmt(r.unseen_val_acc)]
        row += [_fmt(r.test_acc[m]) for m in eval_modes]
        row.append(_fmt(r.mask_churn))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def accuracy(logits, labels):
    return float(np.mean(logits.argmax(axis=1) == labels))


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def _refresh_masks(net, train_x, train_y, unseen_x, unseen_y):
    """Rebuild every mask layer from mask-free reference passes.

    Returns (trace_rows, mean churn or None); churn is None until a layer
    has two refreshed mask sets to compare.
    """
    net.set_eval()
    layers = [(i, l) for i, l in enumerate(net.layers)
              if isinstance(l, NsDropoutLayer)]
    train_ref = capture_reference(net, train_x)
    unseen_ref = capture_reference(net, unseen_x)
    churns = []
    rows = []
    for idx, layer in layers:
        first = layer.previous_mask_set is None
        _, mean = layer.refresh(train_ref[idx], train_y,
                                unseen_ref[idx], unseen_y)
        if not first:
            churns.append(mean)
        for cls in range(layer.class_count):
            rows.append((idx, cls, encode_mask_hex(layer.mask_set.masks[cls])))
    if not churns:
        return rows, None
    return rows, float(np.mean(churns))


def _train_pass(net, x, y, sgd_cfg, lr, epoch):
    for layer in ns_layers(net):
        layer.apply_mode = "labeled"
    net.set_train()
    with np.errstate(all="ignore"):
        logits = net.forward(x, y)
        loss, dlogits = softmax_xent(logits, y)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at epoch "
                                  f"{epoch}")
        acc = accuracy(logits, y)
        net.backward(dlogits)
        try:
            sgd_step(net, sgd_cfg, lr)
        except FloatingPointError as err:
            raise DivergenceError(f"epoch {epoch}: {err}") from err
    return loss, acc


def _evaluate(net, data, mode, labels_for_masks):
    logits = forward_with_mode(net, data.images, mode, labels=labels_for_masks)
    return accuracy(logits, data.labels)


def run_training(config, out_dir=None):
    """Train one model per the config; returns records, net, and trace.

    Per epoch: refresh per-class masks from the current unseen-validation
    reference (policy permitting), run the training pass(es), then evaluate
    on the unseen split and on the test set under every configured eval
    mode.  Files are written when an output directory is given.
    """
    config.validate()
    if out_dir is None and config.output_dir is not None:
        out_dir = config.output_dir
    out_dir = Path(out_dir) if out_dir is not None else None

    source, test = load_dataset(config)
    if config.subsample_n is not None:
        # a full-size draw without explicit stratification is the whole set
        if (config.subsample_n < source.n
                or config.subsample_stratified is True):
            source = ds.subsample(source, config.subsample_n, config.seed,
                                  config.subsample_stratified)
    spec = SplitSpec(budget=config.budget, train_frac=config.train_frac,
                     unseen_frac=1.0 - config.train_frac, seed=config.seed)
    try:
        train_idx, unseen_idx = ds.split_indices(source.n, spec)
    except ds.DatasetError as err:
        raise ConfigError(str(err)) from err
    train = source.take(train_idx, f"{source.name}:train")
    unseen = source.take(unseen_idx, f"{source.name}:unseen")

    if config.zca:
        whitened, transform = ds.zca_whiten(train.images)
        train = Dataset(whitened, train.labels, train.class_count, train.name)
        unseen = Dataset(transform.apply(unseen.images), unseen.labels,
                         unseen.class_count, unseen.name)
        test = Dataset(transform.apply(test.images), test.labels,
                       test.class_count, test.name)

    net = build_network(config, train.dim, train.class_count)
    has_ns = bool(ns_layers(net))
    sgd_cfg = config.sgd_config()
    lr = sgd_cfg.learning_rate
    order_rng = Rng(derive(config.seed, "batch-order"))

    config_facts = config.to_dict()
    config_facts.pop("output_dir")  # not part of the experiment identity
    metadata = {
        "config": config_facts,
        "dataset": {"name": source.name, "n": source.n, "dim": source.dim,
                    "classes": source.class_count, "test_n": test.n},
        "split": {
            "train_n": train.n,
            "unseen_n": unseen.n,
            "train_sha256": _sha256(np.asarray(train_idx,
                                               np.int64).tobytes()),
            "unseen_sha256": _sha256(np.asarray(unseen_idx,
                                                np.int64).tobytes()),
        },
        "init_sha256": _sha256(b"".join(
            l.W.tobytes() + l.b.tobytes() for l in net.dense_layers())),
        "columns": metric_columns(config.eval_modes),
    }

    records = []
    trace = []
    try:
        # with full-batch training a per-batch refresh is a per-epoch refresh
        refresh_at_epoch = (has_ns and config.refresh != "never"
                            and not (config.refresh == "per-batch"
                                     and config.batch_size is not None))
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            churn = None
            if refresh_at_epoch:
                rows, churn = _refresh_masks(net, train.images, train.labels,
                                             unseen.images, unseen.labels)
                trace.extend((epoch,) + row for row in rows)

            if config.batch_size is None:
                loss, acc = _train_pass(net, train.images, train.labels,
                                        sgd_cfg, lr, epoch)
            else:
                perm = order_rng.permutation(train.n)
                losses, hits, churn_vals = [], 0.0, []
                for start in range(0, train.n, config.batch_size):
                    batch = perm[start:start + config.batch_size]
                    bx, by = train.images[batch], train.labels[batch]
                    if has_ns and config.refresh == "per-batch":
                        rows, bc = _refresh_masks(net, bx, by, unseen.images,
                                                  unseen.labels)
                        trace.extend((epoch,) + row for row in rows)
                        if bc is not None:
                            churn_vals.append(bc)
                    bl, ba = _train_pass(net, bx, by, sgd_cfg, lr, epoch)
                    losses.append(bl * len(batch))
                    hits += ba * len(batch)
                loss = float(np.sum(losses) / train.n)
                acc = hits / train.n
                if churn_vals:
                    churn = float(np.mean(churn_vals))

            unseen_acc = _evaluate(net, unseen, "labeled" if has_ns else "off",
                                   unseen.labels)
            if has_ns:
                test_accs = {m: _evaluate(net, test, m, test.labels)
                             for m in config.eval_modes}
            else:
                plain = _evaluate(net, test, "off", None)
                test_accs = {m: plain for m in config.eval_modes}

            records.append(MetricsRecord(
                epoch=epoch, train_loss=loss, train_acc=acc,
                unseen_val_acc=unseen_acc, test_acc=test_accs,
                mask_churn=churn, wall_time=time.perf_counter() - t0))
            log.info("%s epoch %d: loss=%.4f train=%.4f unseen=%.4f",
                     config.regularizer, epoch, loss, acc, unseen_acc)
            if config.anneal is not None:
                lr *= config.anneal
    except DivergenceError as err:
        if out_dir is not None:
            metadata["divergence"] = str(err)
            _write_run_files(out_dir, config, records, trace, net, metadata,
                             diverged=True)
        raise

    result = RunResult(config=config, records=records, network=net,
                       out_dir=out_dir, trace=trace, metadata=metadata)
    if out_dir is not None:
        _write_run_files(out_dir, config, records, trace, net, metadata,
                         test=test)
    return result


def _write_run_files(out_dir, config, records, trace, net, metadata,
                     test=None, diverged=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(
        metrics_csv_lines(records, config.eval_modes))
    (out_dir / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    (out_dir / "timing.txt").write_text(
        "".join(f"{r.epoch},{r.wall_time:.6f}\n" for r in records))
    save_checkpoint(net, out_dir / "checkpoint.nsdw")
    layers = [(i, l) for i, l in enumerate(net.layers)
              if isinstance(l, NsDropoutLayer)]
    if layers:
        lines = ["layer,class,p,kept_hex"]
        for idx, layer in layers:
            for cls in range(layer.class_count):
                lines.append(f"{idx},{cls},{_fmt(layer.p)},"
                             f"{encode_mask_hex(layer.mask_set.masks[cls])}")
        (out_dir / "masks_final.csv").write_text("\n".join(lines) + "\n")
    if config.trace_masks and trace:
        lines = ["epoch,layer,class,kept_hex"]
        lines += [f"{e},{l},{c},{h}" for e, l, c, h in trace]
        (out_dir / "mask_trace.csv").write_text("\n".join(lines) + "\n")
    if diverged or test is None:
        return
    for mode in config.eval_modes:
        counts = emit_confusion_matrix(net, test, mode)
        text = "\n".join(",".join(str(v) for v in row) for row in counts)
        (out_dir / f"confusion_{mode}.csv").write_text(text + "\n")


def best_epoch(records):
    """Earliest epoch achieving the maximum unseen-validation accuracy."""
    best = None
    for r in records:
        if best is None or r.unseen_val_acc > best.unseen_val_acc:
            best = r
    return best.epoch


def run_retrain_schedule(config, out_dir=None):
    """Train, find the best unseen-validation epoch e*, retrain to e*.

    Phase 2 restarts from scratch with the same seed, so its metrics are a
    prefix of phase 1's.  Returns (phase1, phase2, e*).
    """
    config.validate()
    if out_dir is None and config.output_dir is not None:
        out_dir = config.output_dir
    base = Path(out_dir) if out_dir is not None else None
    phase1 = run_training(replace(config, output_dir=None),
                          base / "phase1" if base else None)
    e_star = best_epoch(phase1.records)
    log.info("retrain: best unseen-validation epoch was %d", e_star)
    phase2 = run_training(replace(config, epochs=e_star, output_dir=None),
                          base / "phase2" if base else None)
    return phase1, phase2, e_star


def final_errors(result):
    """Final-epoch error fractions (1 - accuracy) keyed like the CSV."""
    last = result.records[-1]
    out = {"train_err": 1.0 - last.train_acc}
    for mode, acc in last.test_acc.items():
        out[f"test_err_{mode}"] = 1.0 - acc
    return out


def sweep_p(base_config, p_list, out_dir=None):
    """One run per (regularizer, p) on a shared seed and split.

    The swept value replaces every active (nonzero) slot of the base
    config's resolved schedule; p = 0 reproduces the baseline network.
    Returns table rows; writes sweep_p.csv when out_dir is given.
    """
    base_config.validate()
    base = replace(base_config, regularizer="nsdropout")
    schedule = np.asarray(base.p_schedule())
    if not np.any(schedule > 0):
        raise ConfigError("sweep_p needs at least one active mask slot")
    rows = []
    for reg in ("dropout", "nsdropout"):
        for p in p_list:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"swept p {p} outside [0,1]")
            swept = tuple(np.where(schedule > 0, p, 0.0).tolist())
            cfg = replace(base_config, regularizer=reg, p=swept,
                          output_dir=None)
            result = run_training(cfg)
            errs = final_errors(result)
            rows.append({"regularizer": reg, "p": p, **errs})
            log.info("sweep_p %s p=%.3g: %s", reg, p, errs)
    if out_dir is not None:
        _write_table(Path(out_dir) / "sweep_p.csv", rows)
    return rows


def sweep_size(base_config, sizes, out_dir=None):
    """Dropout-vs-nsdropout comparison across training-set budgets.

    Each budget is drawn by stratified subsampling (below 1000 rows this
    guarantees every class appears), then split 80/20; both regularizers
    see identical data.  Returns wide rows; writes sweep_size.csv when
    out_dir is given.
    """
    base_config.validate()
    rows = []
    for n in sizes:
        row = {"n": n}
        for reg in ("dropout", "nsdropout"):
            cfg = replace(base_config, regularizer=reg, subsample_n=n,
                          budget=n, output_dir=None)
            result = run_training(cfg)
            errs = final_errors(result)
            if reg == "dropout":
                row["dropout_test_err"] = errs["test_err_labeled"] \
                    if "test_err_labeled" in errs else next(
                        v for k, v in errs.items() if k.startswith("test"))
            else:
                for key, v in errs.items():
                    if key.startswith("test_err_"):
                        row[f"nsdropout_{key}"] = v
        rows.append(row)
        log.info("sweep_size n=%d: %s", n, row)
    if out_dir is not None:
        _write_table(Path(out_dir) / "sweep_size.csv", rows)
    return rows


def _write_table(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0].keys())
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def emit_confusion_matrix(network, test_set, mode="labeled"):
    """counts[true][pred] over a test set under one eval mode."""
    logits = forward_with_mode(network, test_set.images, mode,
                               labels=test_set.labels)
    preds = logits.argmax(axis=1)
    c = test_set.class_count
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (test_set.labels, preds), 1)
    return counts


def churn_series(trace, epochs):
    """Mean changed-unit count per epoch pair, replayed from trace records.

    Returns [(epoch, mean churn)] for epochs 2..epochs; refreshes that never
    happened contribute zero change (frozen masks never churn).
    """
    by_refresh = {}
    units = {}
    for epoch, layer, cls, hexmask in trace:
        key = (layer, cls)
        mask = by_refresh.setdefault(key, {})
        mask[epoch] = hexmask
        units[key] = max(units.get(key, 0), 4 * len(hexmask))
    series = []
    for epoch in range(2, epochs + 1):
        changes = []
        for key, per_epoch in by_refresh.items():
            prev = [e for e in per_epoch if e < epoch]
            if epoch not in per_epoch or not prev:
                continue
            a = decode_mask_hex(per_epoch[max(prev)], units[key])
            b = decode_mask_hex(per_epoch[epoch], units[key])
            changes.append(float(np.sum(a != b)))
        series.append((epoch, float(np.mean(changes)) if changes else 0.0))
    return series


def emit_mask_trace(result, out_dir=None):
    """Figure-style churn series for a finished run; optionally writes CSV."""
    series = churn_series(result.trace, result.config.epochs)
    if out_dir is not None:
        path = Path(out_dir) / "mask_churn_series.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["epoch,mean_changed"]
        lines += [f"{e},{_fmt(v)}" for e, v in series]
        path.write_text("\n".join(lines) + "\n")
    return series


def restore_run(run_dir):
    """Rebuild a trained network (weights + masks) from a run directory."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "metadata.json").read_text())
    config = config_from_dict(meta["config"])
    net = build_network(config, meta["dataset"]["dim"],
                        meta["dataset"]["classes"])
    from .nn import load_checkpoint, restore_params
    restore_params(net, load_checkpoint(run_dir / "checkpoint.nsdw"))
    masks_path = run_dir / "masks_final.csv"
    if masks_path.exists():
        per_layer = {}
        for line in masks_path.read_text().splitlines()[1:]:
            idx, cls, p, hexmask = line.split(",")
            per_layer.setdefault(int(idx), {})[int(cls)] = (float(p), hexmask)
        for idx, rows in per_layer.items():
            layer = net.layers[idx]
            masks = np.ones((layer.class_count, layer.units))
            for cls, (p, hexmask) in rows.items():
                masks[cls] = decode_mask_hex(hexmask, layer.units)
            layer.mask_set = MaskSet(masks, layer.p,
                                     int((masks[0] == 0).sum()))
    return config, net
