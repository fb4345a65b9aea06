"""Two-stage training, evaluation, and style-gap analyses.

Stage 1 fits the source model (classifier plus depth head) on labeled source
data. Stage 2 freezes that model and trains only the generator so that
stylized target batches reproduce the stored batch-norm statistics while
keeping target content, optionally diversified by amplitude mixing. All
artifacts are CSV or checkpoint files with deterministic bytes.
"""

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import metrics as M
from . import models
from . import spectrum as S
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Dataset, batch_iterator, merge_datasets
from .layers import Adam
from .rng import Rng, derive_seed

BN_LAYER_NAMES = ("F.bn1", "F.bn2", "F.bn3", "R.bn1", "R.bn2")
BLOCK_NAMES = ("b1", "b2", "b3")


@dataclass
class TrainConfig:
    """Hyperparameters for both stages, echoed into every artifact."""

    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_steps: int = 2000
    lr: float = 1e-4
    eta: float = 0.1            # SpecMix amplitude-mixing cap
    lambda_ent: float = 0.01
    lambda_ph: float = 0.01
    alpha: float = 0.1          # batch-norm running-statistic update ratio
    seed: int = 0
    use_dsc: bool = True        # perceptual + phase content terms

    def __post_init__(self):
        if min(self.batch_size, self.stage1_epochs, self.stage2_steps) < 1:
            raise ValueError("batch size, epochs, and steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eta < 0 or self.lambda_ent < 0 or self.lambda_ph < 0:
            raise ValueError("eta and loss weights must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_ent, self.lambda_ph)


@dataclass
class EvalReport:
    auc: float
    hter: float
    eer_threshold: float
    hter_at_half: float
    roc: list = field(default_factory=list)       # (FAR, TPR) pairs
    per_domain: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.9g" % float(value)


def write_csv(path: str, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _as_training_pool(datasets) -> Dataset:
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    return merge_datasets(list(datasets))


def _check_finite(loss_value: float, stage: str, step: int, parts: dict):
    if not np.isfinite(loss_value):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in parts.items())
        raise RuntimeError(
            f"non-finite {stage} loss at step {step} ({detail}); aborting"
        )


# ---------------------------------------------------------------------------
# stage 1: source training


def train_source(config: TrainConfig, datasets, out_dir: str = None):
    """Fit F/H/R on pooled labeled source data; returns (bundle, log rows).

    The classification and depth objectives are summed unweighted; batch-norm
    running statistics accumulate in train mode with ratio ``config.alpha``.
    """
    pool = _as_training_pool(datasets).subset("train")
    if len(pool.images) == 0:
        raise ValueError("source manifest has no training records")
    if np.any(pool.labels < 0):
        raise ValueError("source training requires labeled records")

    bundle = models.build_source_bundle(config.seed)
    for bn in bundle.bn_layers():
        bn.momentum = config.alpha
    opt = Adam(bundle.params(("F", "H", "R")), lr=config.lr)

    log_rows = []
    step = 0
    for epoch in range(config.stage1_epochs):
        epoch_seed = derive_seed(config.seed, "stage1", epoch)
        for batch in batch_iterator(pool, config.batch_size, epoch_seed,
                                    drop_last=True):
            logits, depth, _, _ = models.forward_source(
                bundle, batch["images"], mode="train"
            )
            ce = L.cross_entropy_loss(logits, batch["labels"])
            dm = L.depth_regression_loss(depth, batch["depths"])
            loss = T.add(ce, dm)
            parts = {"cross_entropy": ce.item(), "depth_mse": dm.item()}
            _check_finite(loss.item(), "stage-1", step, parts)
            log_rows.append((step, ce.item(), dm.item(), loss.item()))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            step += 1

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(bundle, os.path.join(out_dir, "source.gdac"))
        write_csv(
            os.path.join(out_dir, "train_source_log.csv"),
            ("step", "cross_entropy", "depth_mse", "total"),
            log_rows,
        )
    return bundle, log_rows


# ---------------------------------------------------------------------------
# stage 2: generator adaptation


def _frozen_snapshot(bundle):
    arrays = []
    for name in ("F", "H", "R", "phi"):
        for p in bundle.net(name).params():
            arrays.append(p.data.copy())
    for bn in bundle.bn_layers():
        arrays.append(bn.running_mean.copy())
        arrays.append(bn.running_var.copy())
        arrays.append(np.array([float(bn.num_updates)]))
    return arrays


def _verify_snapshot(bundle, snapshot):
    current = _frozen_snapshot(bundle)
    for before, after in zip(snapshot, current):
        if not np.array_equal(before, after):
            raise RuntimeError(
                "frozen source model was mutated during adaptation"
            )


def _draw_stage2_batch(pool: Dataset, config: TrainConfig, step: int):
    """Half original target images, half amplitude-mixed copies of them."""
    rng = Rng(derive_seed(config.seed, "stage2", step))
    half = max(2, config.batch_size // 2)
    order = rng.shuffle(np.arange(len(pool.images)))
    idx = np.asarray(order[:half])
    originals = pool.images[idx]
    mixed, _, _ = S.specmix_batch(originals, rng, config.eta)
    return np.concatenate([originals, mixed], axis=0)


def adapt_generator(config: TrainConfig, bundle, target_dataset,
                    out_dir: str = None, generator=None):
    """Train only the generator against the frozen source model.

    Per step: draw a target batch, diversify half of it by amplitude mixing,
    stylize with G, run the frozen model collecting per-layer batch
    statistics (running statistics untouched), assemble the statistic,
    content, and entropy objectives, and take an Adam step on G alone. The
    frozen parameters and running statistics are snapshot before the run and
    verified bitwise after it.
    """
    if len(bundle.bn_layers()) == 0:
        raise ValueError("bundle has no batch-norm registry to align against")
    if any(bn.num_updates == 0 for bn in bundle.bn_layers()):
        raise ValueError(
            "source model has no stored running statistics; train it first"
        )
    pool = target_dataset.subset("train")
    if len(pool.images) < 2:
        raise ValueError("adaptation needs at least two target images")

    if generator is None:
        generator = bundle.G or models.build_generator(config.seed)
    bundle.G = generator
    models.freeze(bundle, ["F", "H", "R", "phi"])
    bundle.trainable["G"] = True
    snapshot = _frozen_snapshot(bundle)

    opt = Adam(generator.params(), lr=config.lr)
    weights = config.weights()
    stored = [(bn.running_mean, bn.running_var) for bn in bundle.bn_layers()]

    log_rows = []
    stat_ema = None
    for step in range(config.stage2_steps):
        x_t = _draw_stage2_batch(pool, config, step)
        x_st = generator.forward(T.Tensor(x_t))
        logits, depth, batch_stats, _ = models.forward_source(
            bundle, x_st, mode="stats"
        )

        l_stat = L.stat_consistency_loss(batch_stats, stored)
        if config.use_dsc:
            feat_tgt = bundle.phi.features(T.Tensor(x_t))
            feat_gen = bundle.phi.features(x_st)
            l_per = L.perceptual_loss(feat_gen, feat_tgt)
            l_ph = S.phase_alignment_loss(x_t, x_st)
        else:
            l_per = T.Tensor(0.0)
            l_ph = T.Tensor(0.0)
        l_ent1 = L.entropy_classifier(T.softmax(logits, axis=1))
        l_ent2 = L.entropy_depth(depth)
        total = L.total_loss(l_stat, l_per, l_ent1, l_ent2, l_ph, weights)

        report = L.LossReport.from_components(
            l_stat.item(), l_per.item(), l_ent1.item(), l_ent2.item(),
            l_ph.item(), weights,
        )
        _check_finite(total.item(), "stage-2", step, vars(report))
        # monitoring-only running mean of the statistic loss
        stat_ema = report.stat if stat_ema is None else (
            0.9 * stat_ema + 0.1 * report.stat
        )
        log_rows.append((step, report.stat, report.per, report.ent1,
                         report.ent2, report.ph, stat_ema, report.total))

        opt.zero_grad()
        T.backward(total)
        opt.step()

    _verify_snapshot(bundle, snapshot)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(bundle, os.path.join(out_dir, "adapted.gdac"))
        write_csv(
            os.path.join(out_dir, "adapt_log.csv"),
            ("step", "stat", "per", "ent1", "ent2", "ph", "stat_ema",
             "total"),
            log_rows,
        )
    return bundle, log_rows


# ---------------------------------------------------------------------------
# evaluation


def _stylize(generator, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return generator.forward(T.Tensor(images)).data


def predict_scores(bundle, dataset: Dataset, generator=None,
                   batch_size: int = 64) -> np.ndarray:
    """Live-class probabilities for every record, in manifest order."""
    scores = []
    with T.no_grad():
        for start in range(0, len(dataset.images), batch_size):
            x = dataset.images[start:start + batch_size]
            if generator is not None:
                x = _stylize(generator, x)
            logits, _, _, _ = models.forward_source(bundle, x, mode="eval")
            p = T.softmax(logits, axis=1).data
            scores.append(p[:, 1])
    return np.concatenate(scores)


def evaluate(bundle, dataset: Dataset, generator=None,
             config: TrainConfig = None) -> EvalReport:
    """Score a labeled dataset through the frozen model, optionally stylized.

    HTER is reported at the equal-error threshold of these scores; the 0.5
    operating point is included for transparency.
    """
    if len(dataset.images) == 0:
        raise ValueError("evaluation dataset is empty")
    if np.any(dataset.labels < 0):
        raise ValueError("evaluation requires labeled records")
    scores = predict_scores(bundle, dataset, generator)
    labels = dataset.labels
    auc = M.roc_auc(scores, labels)
    threshold, _, _ = M.eer_threshold(scores, labels)
    report = EvalReport(
        auc=auc,
        hter=M.hter(scores, labels, threshold),
        eer_threshold=float(threshold),
        hter_at_half=M.hter(scores, labels, 0.5),
        roc=M.roc_points(scores, labels),
        config=asdict(config) if config is not None else {},
    )
    for domain in sorted(set(dataset.domains)):
        keep = np.array([d == domain for d in dataset.domains])
        dom_labels = labels[keep]
        if len(set(dom_labels.tolist())) < 2:
            continue
        report.per_domain[domain] = {
            "auc": M.roc_auc(scores[keep], dom_labels),
            "hter": M.hter(scores[keep], dom_labels, threshold),
        }
    return report


def write_eval_report(report: EvalReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    rows = [
        ("auc", report.auc),
        ("hter", report.hter),
        ("eer_threshold", report.eer_threshold),
        ("hter_at_half", report.hter_at_half),
    ]
    for domain, values in sorted(report.per_domain.items()):
        rows.append((f"auc_{domain}", values["auc"]))
        rows.append((f"hter_{domain}", values["hter"]))
    write_csv(os.path.join(out_dir, "eval_report.csv"),
              ("metric", "value"), rows)
    write_csv(os.path.join(out_dir, "roc.csv"), ("far", "tpr"), report.roc)


# ---------------------------------------------------------------------------
# discrepancy analyses


def dataset_bn_moments(bundle, dataset: Dataset, generator=None,
                       batch_size: int = 32):
    """Dataset-level (mean, variance) of each BN layer's input, streamed.

    The model runs in eval mode (normalizing with its stored statistics, as
    at inference), while each layer records its input moments per batch.
    Those are pooled exactly via E[x^2] - E[x]^2 with batch-size weights, so
    the result is independent of the streaming batch size. Running
    statistics are never touched.
    """
    layers = bundle.bn_layers()
    weight_sum = 0.0
    mean_acc = [0.0] * len(layers)
    sq_acc = [0.0] * len(layers)
    with T.no_grad():
        for start in range(0, len(dataset.images), batch_size):
            x = dataset.images[start:start + batch_size]
            if generator is not None:
                x = _stylize(generator, x)
            models.forward_source(bundle, x, mode="eval")
            w = float(x.shape[0])
            weight_sum += w
            for i, bn in enumerate(layers):
                mean = bn.last_input_mean
                var = bn.last_input_var
                mean_acc[i] = mean_acc[i] + w * mean
                sq_acc[i] = sq_acc[i] + w * (var + mean * mean)
    out = []
    for i in range(len(layers)):
        mean = mean_acc[i] / weight_sum
        var = sq_acc[i] / weight_sum - mean * mean
        out.append((mean, np.maximum(var, 0.0)))
    return out


def bn_discrepancy(bundle, dataset: Dataset, generator=None,
                   batch_size: int = 32):
    """Per-layer distance between dataset statistics and stored statistics.

    Returns (layer name, mean |delta mu|, mean |delta var|) rows, shallow to
    deep. Labels are never consulted, so unlabeled data is fine.
    """
    moments = dataset_bn_moments(bundle, dataset, generator, batch_size)
    rows = []
    for name, bn, (mean, var) in zip(BN_LAYER_NAMES, bundle.bn_layers(),
                                     moments):
        d_mean = float(np.mean(np.abs(mean - bn.running_mean)))
        d_var = float(np.mean(np.abs(var - bn.running_var)))
        rows.append((name, d_mean, d_var))
    return rows


def block_features(bundle, dataset: Dataset, generator=None,
                   batch_size: int = 64):
    """Spatially pooled per-block features for every record: {block: [N,C]}."""
    collected = {name: [] for name in BLOCK_NAMES}
    with T.no_grad():
        for start in range(0, len(dataset.images), batch_size):
            x = dataset.images[start:start + batch_size]
            if generator is not None:
                x = _stylize(generator, x)
            _, _, _, blocks = models.forward_source(bundle, x, mode="eval")
            for name, feat in zip(BLOCK_NAMES, blocks):
                collected[name].append(feat.data.mean(axis=(2, 3)))
    return {name: np.concatenate(parts) for name, parts in collected.items()}


def mmd_curve(bundle, source_dataset: Dataset, target_dataset: Dataset,
              generator=None, kernel: str = "rbf"):
    """Per-block MMD between source features and (optionally stylized)
    target features; rows run shallow to deep."""
    src = block_features(bundle, source_dataset)
    tgt = block_features(bundle, target_dataset, generator)
    return [(name, M.mmd(src[name], tgt[name], kernel=kernel))
            for name in BLOCK_NAMES]


def export_features_csv(bundle, dataset: Dataset, layer_tag: str, path: str,
                        generator=None):
    """One row per record: path, domain, label, then pooled channel features."""
    if layer_tag not in BLOCK_NAMES:
        raise ValueError(
            f"unknown layer tag {layer_tag!r}, expected one of {BLOCK_NAMES}"
        )
    feats = block_features(bundle, dataset, generator)[layer_tag]
    header = ["path", "domain", "label"] + [
        f"f{i:03d}" for i in range(feats.shape[1])
    ]
    rows = []
    for i in range(feats.shape[0]):
        rows.append([dataset.paths[i], dataset.domains[i],
                     int(dataset.labels[i])] + feats[i].tolist())
    write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# ablation


ABLATION_ROWS = ("baseline", "nsc", "nsc_dsc", "full")


def ablation_config(config: TrainConfig, row: str) -> TrainConfig:
    """Component switches per ablation row.

    The statistic and entropy terms are the base adaptation objective and
    stay on in every adapted row; "nsc_dsc" adds the content terms, "full"
    additionally enables amplitude mixing.
    """
    if row == "nsc":
        return replace(config, eta=0.0, use_dsc=False)
    if row == "nsc_dsc":
        return replace(config, eta=0.0, use_dsc=True)
    if row == "full":
        return config
    raise ValueError(f"unknown ablation row {row!r}")


def ablation_run(config: TrainConfig, bundle, target_dataset: Dataset,
                 eval_dataset: Dataset, out_dir: str = None):
    """Adapt under each component subset and score the target test split.

    Returns [(row name, EvalReport)] in baseline / nsc / nsc_dsc / full
    order. Every adapted row starts from a fresh identically seeded
    generator, so rows differ only in the enabled objectives.
    """
    results = [("baseline", evaluate(bundle, eval_dataset, config=config))]
    for row in ABLATION_ROWS[1:]:
        row_config = ablation_config(config, row)
        generator = models.build_generator(config.seed)
        adapt_generator(row_config, bundle, target_dataset,
                        generator=generator)
        results.append(
            (row, evaluate(bundle, eval_dataset, generator=generator,
                           config=row_config))
        )
    bundle.G = None
    bundle.trainable.pop("G", None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(
            os.path.join(out_dir, "ablation.csv"),
            ("config", "hter", "auc"),
            [(name, rep.hter, rep.auc) for name, rep in results],
        )
    return results
