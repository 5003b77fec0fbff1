"""Command-line entry points: simulate, preprocess, train, evaluate,
stratify.

Every command resolves a flat dotted-key config (file values overridden
by CLI flags), echoes the resolved config into the output directory, and
writes delimited outputs plus rendered figures. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import cohortsim, fileio, metrics, nn, objective, tensor  # noqa: E402
from . import longitudinal as lg  # noqa: E402
from .errors import ConfigError, DataError, NeuroprogError  # noqa: E402
from .optim import SAM, SGD, Adam, MultiOptimizer  # noqa: E402
from .tensor import Tensor  # noqa: E402

# ---------------------------------------------------------------------------
# run configuration


def _bool(s):
    if str(s).lower() in ("true", "1", "yes"):
        return True
    if str(s).lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _dims(s):
    if isinstance(s, tuple):
        return s
    parts = tuple(int(p) for p in str(s).split(","))
    if len(parts) != 3:
        raise ConfigError(f"expected D,H,W dims, got {s!r}")
    return parts


def _floats(s):
    if isinstance(s, tuple):
        return s
    return tuple(float(p) for p in str(s).split(","))


def _strlist(s):
    if isinstance(s, (tuple, list)):
        return tuple(s)
    return tuple(p for p in str(s).split(",") if p)


def _opt(parser):
    def parse(s):
        if s is None or s == "":
            return None
        return parser(s)
    return parse


# key -> (default, parser). The single source of truth for RunConfig.
CONFIG_KEYS = {
    "seed": (0, int),
    # simulator
    "sim.preset": ("default", str),
    "sim.patients_per_study": (None, _opt(int)),
    "sim.schedule": (None, _opt(_floats)),
    "sim.volume_dims": (None, _opt(_dims)),
    "sim.atrophy_effect": (None, _opt(float)),
    "sim.noise_scale": (1.0, float),
    "sim.missingness_scale": (1.0, float),
    "sim.emit_volumes": (True, _bool),
    # network
    "network.volume_dims": ((32, 32, 32), _dims),
    "network.clin_hidden": (32, int),
    "network.growth_rate": (4, int),
    "network.stem_channels": (8, int),
    "network.stem_kernel": (3, int),
    "network.stem_stride": (1, int),
    "network.block_sizes": ((6, 12), lambda s: tuple(
        int(p) for p in str(s).split(","))),
    "network.head_layers": (16, int),
    "network.fusion": ("broadcast", str),
    "network.leaky_slope": (0.01, float),
    # objective / optimizer
    "objective.lr": (3e-3, float),
    "objective.optimizer": ("adam", str),
    "objective.momentum": (0.9, float),
    "objective.weight_decay": (0.0, float),
    "optim.sam_rho": (0.0, float),
    "objective.mu": (0.1, float),
    "objective.lambda": (8.0, float),
    "objective.batch_size": (8, int),
    "objective.epochs": (30, int),
    "objective.entropy_to_f": (True, _bool),
    "objective.domain_lr_scale": (10.0, float),
    "objective.adv_lr_decay": (0.93, float),
    "objective.adv_warmup_epochs": (5, int),
    # data handling
    "data.heldout_studies": ((), _strlist),
    "data.in_study_fraction": (0.2, float),
    "preprocess.voxel_size_mm": (1.0, float),
}


def resolve_config(file_path=None, overrides=None):
    """Defaults <- config file <- CLI overrides; unknown keys rejected."""
    cfg = {k: d for k, (d, _) in CONFIG_KEYS.items()}
    layers = []
    if file_path:
        layers.append(fileio.read_flat_config(file_path))
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, raw in layer.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(
                    f"unknown config key {key!r} (known keys: "
                    f"{', '.join(sorted(CONFIG_KEYS))})")
            cfg[key] = CONFIG_KEYS[key][1](raw)
    return cfg


def _fmt_value(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


def config_text(cfg):
    return "".join(f"{k} = {_fmt_value(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg):
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(config_text(cfg))


def parse_overrides(rest):
    """Turn leftover `--dotted.key value` / `--dotted.key=value` tokens
    into an override dict."""
    out = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        tok = tok[2:]
        if "=" in tok:
            key, val = tok.split("=", 1)
            i += 1
        else:
            key = tok
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for --{key}")
            val = rest[i + 1]
            i += 2
        out[key] = val
    return out


# ---------------------------------------------------------------------------
# volume preprocessing


def resample_trilinear(vol, src_mm, dst_mm):
    """Resample [C,D,H,W] to the target isotropic spacing."""
    if src_mm == dst_mm:
        return vol.astype(np.float64)
    scale = dst_mm / src_mm
    out_dims = [max(1, int(round(n / scale))) for n in vol.shape[1:]]
    coords = [np.clip((np.arange(n) + 0.5) * scale - 0.5, 0,
                      vol.shape[1 + ax] - 1)
              for ax, n in enumerate(out_dims)]
    los = [np.floor(c).astype(int) for c in coords]
    his = [np.minimum(lo + 1, vol.shape[1 + ax] - 1)
           for ax, lo in enumerate(los)]
    fr = [c - lo for c, lo in zip(coords, los)]
    out = np.zeros((vol.shape[0], *out_dims))
    for c in range(vol.shape[0]):
        v = vol[c]
        acc = np.zeros(out_dims)
        for dz, wz in ((los[0], 1 - fr[0]), (his[0], fr[0])):
            for dy, wy in ((los[1], 1 - fr[1]), (his[1], fr[1])):
                for dx, wx in ((los[2], 1 - fr[2]), (his[2], fr[2])):
                    sub = v[np.ix_(dz, dy, dx)]
                    w = (wz[:, None, None] * wy[None, :, None]
                         * wx[None, None, :])
                    acc += w * sub
        out[c] = acc
    return out


def crop_or_pad(vol, dims):
    """Center-crop / zero-pad [C,D,H,W] spatially to `dims`."""
    out = vol
    for ax, target in enumerate(dims):
        n = out.shape[1 + ax]
        if n > target:
            start = (n - target) // 2
            sl = [slice(None)] * out.ndim
            sl[1 + ax] = slice(start, start + target)
            out = out[tuple(sl)]
        elif n < target:
            before = (target - n) // 2
            pad = [(0, 0)] * out.ndim
            pad[1 + ax] = (before, target - n - before)
            out = np.pad(out, pad)
    return out


def preprocess_volume(vol, src_mm, dst_mm, dims):
    """Resample -> rescale to [0,1] -> Z-score over the >0 mask ->
    crop/pad."""
    v = resample_trilinear(np.asarray(vol, dtype=np.float64), src_mm,
                           dst_mm)
    lo, hi = v.min(), v.max()
    v = (v - lo) / (hi - lo) if hi > lo else v - lo
    mask = v > 0
    if not mask.any():
        raise DataError("volume has no in-mask (positive) voxels")
    mu, sd = v[mask].mean(), v[mask].std()
    if sd == 0:
        raise DataError("in-mask intensities are constant")
    v = np.where(mask, (v - mu) / sd, 0.0)
    return crop_or_pad(v, dims)


# ---------------------------------------------------------------------------
# dataset assembly


TASK_SETS = {"cdrsb": ("cdrsb",), "mmse": ("mmse",),
             "adas": ("adas_cog12",), "all": lg.ENDPOINTS}


def load_processed(data_dir):
    visits = fileio.read_visits_csv(os.path.join(data_dir, "visits.csv"))
    by_pid = {}
    for v in visits:
        by_pid.setdefault(v.patient_id, []).append(v)
    patients = [lg.Patient.build(vs) for vs in by_pid.values()]
    patients.sort(key=lambda p: p.id)
    with open(os.path.join(data_dir, "splits.json"), encoding="utf-8") as fh:
        split_ids = json.load(fh)
    schema = lg.Schema.from_json(
        open(os.path.join(data_dir, "schema.json"), encoding="utf-8").read())
    imputer = lg.Imputer.from_json(
        open(os.path.join(data_dir, "imputer.json"),
             encoding="utf-8").read())
    by_id = {p.id: p for p in patients}
    splits = {name: [by_id[i] for i in ids if i in by_id]
              for name, ids in split_ids.items()}
    return patients, splits, schema, imputer


def encode_all_visits(patients, schema, imputer):
    """Impute the continuous table over every visit, then encode each
    visit; returns {(patient_id, month): vector}."""
    visits = [v for p in patients for v in p.visits]
    table = np.array([[np.nan if getattr(v, c) is None else getattr(v, c)
                       for c in lg.CONTINUOUS] for v in visits])
    filled = imputer.transform(table)
    out = {}
    for row, v in zip(filled, visits):
        # bypass Visit range validation: imputed values may sit slightly
        # outside the instrument ranges
        vv = copy.copy(v)
        for j, name in enumerate(lg.CONTINUOUS):
            setattr(vv, name, float(row[j]))
        out[(v.patient_id, v.month)] = lg.encode_clinical(vv, schema)
    return out


def _load_volume(data_dir, ref):
    vol, _ = fileio.read_vvol(os.path.join(data_dir, ref))
    return vol


def build_train_data(patients, volume_of, encodings, tasks, domain_of,
                     use_mri, use_clin):
    """Baseline-visit features with 12-month interpolated-change targets.

    `volume_of` maps a volume reference to its array (a directory loader
    in the CLI, an in-memory dict elsewhere).
    """
    mri, clin, y, mask, bias, ids = [], [], [], [], [], []
    for p in patients:
        base = p.baseline
        labels = lg.interpolate_labels(p)
        if not any(labels[ep].valid for ep in tasks):
            continue
        if use_mri:
            if base.volume_ref is None:
                continue
            mri.append(volume_of(base.volume_ref))
        if use_clin:
            clin.append(encodings[(p.id, base.month)])
        y.append([labels[ep].value_at_12 if labels[ep].valid else 0.0
                  for ep in tasks])
        mask.append([labels[ep].valid for ep in tasks])
        bias.append(domain_of.get(p.study_id, 0))
        ids.append(p.id)
    if not y:
        raise DataError("no usable patients in this split")
    return objective.TrainData(
        np.stack(mri).astype(np.float32) if use_mri else None,
        np.stack(clin) if use_clin else None,
        np.array(y), np.array(mask, dtype=bool), np.array(bias),
        np.array(ids))


def build_pretrain_data(patients, volume_of, schema, tasks):
    """Visit-level volumes with standardized current scores as targets."""
    mri, y, mask = [], [], []
    for p in patients:
        for v in p.visits:
            if v.volume_ref is None:
                continue
            row, m = [], []
            for ep in tasks:
                val = getattr(v, ep)
                m.append(val is not None)
                row.append(0.0 if val is None
                           else (val - schema.means[ep]) / schema.stds[ep])
            mri.append(volume_of(v.volume_ref))
            y.append(row)
            mask.append(m)
    if not y:
        raise DataError("no visits with volumes for pretraining")
    return objective.TrainData(np.stack(mri).astype(np.float32), None,
                               np.array(y), np.array(mask, dtype=bool),
                               np.zeros(len(y), dtype=np.int64))


def make_network(cfg, schema_width, num_domains, modality):
    return nn.NetworkConfig(
        volume_dims=cfg["network.volume_dims"],
        clin_width=schema_width,
        clin_hidden=cfg["network.clin_hidden"],
        growth_rate=cfg["network.growth_rate"],
        stem_channels=cfg["network.stem_channels"],
        stem_kernel=cfg["network.stem_kernel"],
        stem_stride=cfg["network.stem_stride"],
        block_sizes=cfg["network.block_sizes"],
        head_layers=cfg["network.head_layers"],
        num_endpoints=len(TASK_SETS["all"]),
        num_domains=max(num_domains, 2),
        fusion=cfg["network.fusion"],
        leaky_slope=cfg["network.leaky_slope"],
        use_imaging=modality in ("mri", "both"),
        use_clinical=modality in ("clin", "both"),
        use_domain_head=modality in ("mri", "both") and num_domains >= 2,
    ).validate()


def make_train_config(cfg, net, tasks):
    net = copy.copy(net)
    net.num_endpoints = len(tasks)
    return objective.TrainConfig(
        network=net,
        lr=cfg["objective.lr"],
        optimizer=cfg["objective.optimizer"],
        momentum=cfg["objective.momentum"],
        weight_decay=cfg["objective.weight_decay"],
        sam_rho=cfg["optim.sam_rho"],
        mu=cfg["objective.mu"],
        lam=cfg["objective.lambda"],
        batch_size=cfg["objective.batch_size"],
        epochs=cfg["objective.epochs"],
        seed=cfg["seed"],
        entropy_to_f=cfg["objective.entropy_to_f"],
        domain_lr_scale=cfg["objective.domain_lr_scale"],
        adv_lr_decay=cfg["objective.adv_lr_decay"],
        adv_warmup_epochs=cfg["objective.adv_warmup_epochs"])


def make_optimizer(tconf, params, partitions=None):
    named = list(params.named(partitions))

    def build(group, lr):
        if tconf.optimizer == "sgd":
            return SGD(group, lr, tconf.momentum, tconf.weight_decay)
        if tconf.optimizer == "adam":
            return Adam(group, lr, weight_decay=tconf.weight_decay)
        raise ConfigError(f"unknown optimizer {tconf.optimizer!r}")

    # Parameters on the adversary's (faster) schedule: the domain head h,
    # plus the stem DC coordinate when the adversarial game is active. The
    # DC coordinate is the offset-sensitivity of the extractor (see
    # nn._stem_kernel); scrubbing a planted scanner offset means moving it
    # on the order of its init value, far beyond what the base step size
    # covers in a short run. With the game off it keeps the base schedule
    # so a plain run leaves offset sensitivity to the endpoint loss alone.
    adversarial = tconf.mu > 0 or tconf.lam > 0

    def fast(name):
        return name.startswith("h.") or (adversarial
                                         and name == "f.stem.conv.dc")

    head = [(n, t) for n, t in named if fast(n)]
    rest = [(n, t) for n, t in named if not fast(n)]
    if head and tconf.domain_lr_scale != 1.0:
        base = MultiOptimizer(
            [build(rest, tconf.lr),
             build(head, tconf.lr * tconf.domain_lr_scale)],
            decay=[1.0, tconf.adv_lr_decay])
    else:
        base = build(named, tconf.lr)
    if tconf.sam_rho > 0:
        return SAM(base, rho=tconf.sam_rho)
    return base


def forward_features(data, params, net, batch_size=16):
    """Eval-mode predictions and pooled imaging features."""
    preds, feats = [], []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        batch = data.batch(idx)
        fe = emb = None
        if net.use_imaging:
            fe = nn.feature_extractor_forward(Tensor(batch.mri), params,
                                              net, "eval")
            feats.append(fe.data.mean(axis=(2, 3, 4)))
        if net.use_clinical:
            emb = nn.clinical_encoder_forward(Tensor(batch.clin), params,
                                              net)
        if fe is not None and emb is not None:
            fused = nn.fuse(fe, emb, net.fusion)
        elif fe is not None:
            fused = fe
        else:
            from . import tensor as T
            b, c = emb.shape
            fused = T.reshape(emb, (b, c, 1, 1, 1))
        out = nn.endpoint_head_forward(fused, params, net, "eval")
        preds.append(out.data)
        tensor.release_graph(out)
    return (np.concatenate(preds),
            np.concatenate(feats) if feats else None)


def split_r2(pred, data, tasks):
    """Per-endpoint R² over the observed entries; None when undefined."""
    out = {}
    for j, ep in enumerate(tasks):
        obs = data.mask[:, j]
        try:
            out[ep] = (metrics.r_squared(pred[obs, j],
                                         data.y_endpoint[obs, j]),
                       int(obs.sum()))
        except NeuroprogError:
            out[ep] = (None, int(obs.sum()))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg):
    sim = cohortsim.preset(cfg["sim.preset"])
    sim.seed = cfg["seed"]
    if cfg["sim.patients_per_study"] is not None:
        sim.patients_per_study = cfg["sim.patients_per_study"]
    if cfg["sim.schedule"] is not None:
        sim.schedule = cfg["sim.schedule"]
    if cfg["sim.volume_dims"] is not None:
        sim.volume_dims = cfg["sim.volume_dims"]
    if cfg["sim.atrophy_effect"] is not None:
        sim.atrophy_effect = cfg["sim.atrophy_effect"]
    sim.noise_sigma = {k: v * cfg["sim.noise_scale"]
                       for k, v in sim.noise_sigma.items()}
    sim.missingness = {k: min(v * cfg["sim.missingness_scale"], 1.0)
                       for k, v in sim.missingness.items()}
    sim.emit_volumes = cfg["sim.emit_volumes"]
    echo_config(cfg, args.out)
    cohortsim.generate_cohort(sim, out_dir=args.out)
    print(f"wrote cohort to {args.out}")
    return 0


def cmd_preprocess(args, cfg):
    visits = fileio.read_visits_csv(os.path.join(args.data, "visits.csv"))
    by_pid = {}
    for v in visits:
        by_pid.setdefault(v.patient_id, []).append(v)
    patients = sorted((lg.Patient.build(vs) for vs in by_pid.values()),
                      key=lambda p: p.id)
    splits = lg.split_cohort(patients, cfg["seed"],
                             cfg["data.heldout_studies"],
                             cfg["data.in_study_fraction"])
    echo_config(cfg, args.out)
    with open(os.path.join(args.out, "splits.json"), "w",
              encoding="utf-8") as fh:
        json.dump({k: sorted(p.id for p in v) for k, v in splits.items()},
                  fh, indent=2, sort_keys=True)

    # training-split-fitted clinical transforms
    train_visits = [v for p in splits["train"] for v in p.visits]
    schema = lg.Schema.fit(train_visits)
    table = np.array([[np.nan if getattr(v, c) is None else getattr(v, c)
                       for c in lg.CONTINUOUS] for v in train_visits])
    _, imputer = lg.impute_iterative(table, columns=lg.CONTINUOUS)
    for name, text in (("schema.json", schema.to_json()),
                       ("imputer.json", imputer.to_json())):
        with open(os.path.join(args.out, name), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    fileio.write_visits_csv(os.path.join(args.out, "visits.csv"), visits)

    # encoded clinical table (imputed + standardized/one-hot)
    encodings = encode_all_visits(patients, schema, imputer)
    with open(os.path.join(args.out, "clinical.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "month"]
                   + [f"x{i}" for i in range(schema.width)])
        for (pid, month), vec in sorted(encodings.items()):
            w.writerow([pid, month] + [f"{x:.10g}" for x in vec])

    failures = []
    dims = cfg["network.volume_dims"]
    for v in visits:
        if v.volume_ref is None:
            continue
        dst = os.path.join(args.out, v.volume_ref)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        try:
            vol, header = fileio.read_vvol(
                os.path.join(args.data, v.volume_ref))
            out = preprocess_volume(vol, header.get("voxel_size_mm", 1.0),
                                    cfg["preprocess.voxel_size_mm"], dims)
            fileio.write_vvol(dst, out, cfg["preprocess.voxel_size_mm"])
        except (NeuroprogError, OSError) as exc:
            failures.append((v.volume_ref, str(exc)))
    if failures:
        with open(os.path.join(args.out, "errors.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["volume", "error"])
            w.writerows(failures)
        print(f"{len(failures)} volume(s) failed preprocessing; see "
              f"errors.csv", file=sys.stderr)
        return 1
    print(f"preprocessed {len(patients)} patients to {args.out}")
    return 0


def _plot_epochs(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in rows]
    for key in ("train_loss", "val_loss"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            ax.plot(epochs[:len(vals)], vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train(args, cfg):
    patients, splits, schema, imputer = load_processed(args.data)
    tasks = TASK_SETS[args.tasks]
    use_mri = args.modality in ("mri", "both")
    use_clin = args.modality in ("clin", "both")
    train_studies = sorted({p.study_id for p in splits["train"]})
    domain_of = {s: i for i, s in enumerate(train_studies)}
    net = make_network(cfg, schema.width, len(train_studies), args.modality)
    tconf = make_train_config(cfg, net, tasks)
    net = tconf.network
    echo_config(cfg, args.out)
    chash = config_hash(cfg)
    params = nn.init_params(net, seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    ckpt_path = os.path.join(args.out, "model.ckpt")
    rows = []

    if args.stage == "pretrain":
        if not use_mri:
            raise ConfigError("pretraining requires the imaging branch")
        nn.init_pretrain_head(params, net, seed=cfg["seed"])
        loader = lambda ref: _load_volume(args.data, ref)
        data = build_pretrain_data(
            splits["train"] + splits["validation"], loader, schema, tasks)
        opt = make_optimizer(tconf, params, ["f", "p"])
        best = np.inf
        for epoch in range(tconf.epochs):
            stats = objective.pretrain_epoch(data, params, opt, tconf, rng)
            rows.append({"epoch": epoch, "train_loss": stats["total"],
                         "val_loss": None, "val_weighted_r2": None})
            if stats["total"] < best:
                best = stats["total"]
                fileio.save_checkpoint(ckpt_path, params,
                                       config_hash=chash,
                                       seed=cfg["seed"], epoch=epoch,
                                       partitions=("f", "p"))
    else:
        if args.init:
            _, arrays, buffers = fileio.load_checkpoint(args.init)
            fileio.restore_params(params, arrays, buffers,
                                  partitions=("f",))
        encodings = encode_all_visits(patients, schema, imputer)
        loader = lambda ref: _load_volume(args.data, ref)
        train = build_train_data(splits["train"], loader, encodings,
                                 tasks, domain_of, use_mri, use_clin)
        val = build_train_data(splits["validation"], loader, encodings,
                               tasks, domain_of, use_mri, use_clin)
        opt = make_optimizer(tconf, params)
        best = -np.inf
        for epoch in range(tconf.epochs):
            stats = objective.train_epoch(train, params, opt, tconf,
                                          rng, epoch=epoch)
            pred, _ = forward_features(val, params, net)
            r2s = split_r2(pred, val, tasks)
            parts = [(r2, n) for r2, n in r2s.values() if r2 is not None]
            score = metrics.weighted_r_squared(parts) if parts else -np.inf
            val_loss = float(np.mean((pred - val.y_endpoint)[val.mask] ** 2))
            rows.append({"epoch": epoch, "train_loss": stats["total"],
                         "val_loss": val_loss, "val_weighted_r2": score})
            if score > best:
                best = score
                fileio.save_checkpoint(ckpt_path, params,
                                       config_hash=chash,
                                       seed=cfg["seed"], epoch=epoch)
        if not os.path.exists(ckpt_path):
            fileio.save_checkpoint(ckpt_path, params, config_hash=chash,
                                   seed=cfg["seed"], epoch=tconf.epochs - 1)

    with open(os.path.join(args.out, "epochs.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_weighted_r2"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['train_loss']:.10g}",
                        "" if r["val_loss"] is None
                        else f"{r['val_loss']:.10g}",
                        "" if r["val_weighted_r2"] is None
                        else f"{r['val_weighted_r2']:.10g}"])
    _plot_epochs(rows, os.path.join(args.out, "loss_curve.png"))
    print(f"trained {args.stage} ({args.modality}/{args.tasks}); "
          f"checkpoint at {ckpt_path}")
    return 0


def _rebuild_from_checkpoint(args, cfg):
    patients, splits, schema, imputer = load_processed(args.data)
    manifest, arrays, buffers = fileio.load_checkpoint(args.checkpoint)
    tasks = TASK_SETS[args.tasks]
    train_studies = sorted({p.study_id for p in splits["train"]})
    net = make_network(cfg, schema.width, len(train_studies), args.modality)
    tconf = make_train_config(cfg, net, tasks)
    net = tconf.network
    params = nn.init_params(net, seed=cfg["seed"])
    fileio.restore_params(params, arrays, buffers)
    chash = config_hash(cfg)
    if manifest.get("config_hash") and manifest["config_hash"] != chash:
        if not getattr(args, "allow_hash_mismatch", False):
            print(f"warning: checkpoint config hash "
                  f"{manifest['config_hash']} != current {chash}",
                  file=sys.stderr)
    return (patients, splits, schema, imputer, params, net, tasks,
            train_studies, chash)


def cmd_evaluate(args, cfg):
    (patients, splits, schema, imputer, params, net, tasks, train_studies,
     chash) = _rebuild_from_checkpoint(args, cfg)
    domain_of = {s: i for i, s in enumerate(train_studies)}
    use_mri, use_clin = net.use_imaging, net.use_clinical
    encodings = encode_all_visits(patients, schema, imputer)
    names = (["validation", "in_study_test", "out_study_test"]
             if args.split == "all" else [args.split])
    per_dataset = {ep: {} for ep in tasks}
    probe = probe_chance = None
    for name in names:
        if not splits.get(name):
            continue
        data = build_train_data(splits[name],
                                lambda ref: _load_volume(args.data, ref),
                                encodings, tasks, domain_of, use_mri,
                                use_clin)
        pred, feats = forward_features(data, params, net)
        for ep, (r2, n) in split_r2(pred, data, tasks).items():
            per_dataset[ep][name] = (r2, n)
        if name == "validation" and feats is not None:
            domains = np.array([domain_of.get(patient_study(splits[name],
                                                            pid), 0)
                                for pid in data.ids])
            try:
                probe = metrics.probe_accuracy(feats, domains,
                                               seed=cfg["seed"])
                probe_chance = metrics.chance_rate(domains)
            except NeuroprogError:
                pass
    report = metrics.MetricsReport(per_dataset, probe=probe,
                                   probe_chance=probe_chance,
                                   config_hash=chash, seed=cfg["seed"])
    echo_config(cfg, args.out)
    with open(os.path.join(args.out, "metrics.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["endpoint", "dataset", "r2", "n"])
        for ep in sorted(per_dataset):
            for ds in sorted(per_dataset[ep]):
                r2, n = per_dataset[ep][ds]
                w.writerow([ep, ds, "" if r2 is None else f"{r2:.10g}", n])

    fig, ax = plt.subplots(figsize=(6, 4))
    labels, vals = [], []
    for ep in sorted(per_dataset):
        for ds in sorted(per_dataset[ep]):
            r2 = per_dataset[ep][ds][0]
            if r2 is not None:
                labels.append(f"{ep}\n{ds}")
                vals.append(r2)
    if vals:
        ax.bar(range(len(vals)), vals)
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("R²")
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "r2_bars.png"), dpi=100)
    plt.close(fig)
    print(report.to_json())
    return 0


def patient_study(patients, pid):
    for p in patients:
        if p.id == pid:
            return p.study_id
    return None


def cmd_stratify(args, cfg):
    (patients, splits, schema, imputer, params, net, tasks, train_studies,
     _) = _rebuild_from_checkpoint(args, cfg)
    if "cdrsb" not in tasks:
        raise ConfigError("stratification needs the cdrsb task")
    domain_of = {s: i for i, s in enumerate(train_studies)}
    encodings = encode_all_visits(patients, schema, imputer)
    pool = (splits["validation"] + splits["in_study_test"]
            + splits["out_study_test"]) or patients
    data = build_train_data(pool, lambda ref: _load_volume(args.data, ref),
                            encodings, tasks, domain_of, net.use_imaging,
                            net.use_clinical)
    pred, _ = forward_features(data, params, net)
    j = tasks.index("cdrsb")
    by_id = {p.id: p for p in pool}
    months = sorted({v.month for p in pool for v in p.visits})
    traj = np.full((len(data.ids), len(months)), np.nan)
    for i, pid in enumerate(data.ids):
        p = by_id[pid]
        base = p.baseline.cdrsb
        if base is None:
            continue
        for v in p.visits:
            if v.cdrsb is not None:
                traj[i, months.index(v.month)] = v.cdrsb - base
    table = metrics.stratify_tertiles(pred[:, j], traj, months)
    echo_config(cfg, args.out)
    with open(os.path.join(args.out, "tertiles.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tertile", "month", "mean_change", "n"])
        for tert, month, mean in table.to_rows():
            w.writerow([tert, month,
                        "" if np.isnan(mean) else f"{mean:.10g}",
                        table.sizes[tert]])

    fig, ax = plt.subplots(figsize=(6, 4))
    for tert, mt in sorted(table.mean_trajectories.items()):
        ax.plot(table.months, mt, marker="o", label=f"tertile {tert}")
    ax.set_xlabel("month")
    ax.set_ylabel("mean CDRSB change")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(args.out, "tertile_trajectories.png"), dpi=100)
    plt.close(fig)
    print(f"wrote tertile table to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing / entry point


def build_parser():
    p = argparse.ArgumentParser(
        prog="neuroprog",
        description="Multimodal progression modelling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic cohort")
    sim.add_argument("--preset", default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--config", default=None)
    sim.set_defaults(fn=cmd_simulate)

    pre = sub.add_parser("preprocess", help="normalize volumes and fit "
                                            "clinical transforms")
    pre.add_argument("--data", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--config", default=None)
    pre.set_defaults(fn=cmd_preprocess)

    tr = sub.add_parser("train", help="train or pretrain the model")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--stage", choices=("pretrain", "finetune"),
                    default="finetune")
    tr.add_argument("--modality", choices=("clin", "mri", "both"),
                    default="both")
    tr.add_argument("--tasks", choices=tuple(TASK_SETS), default="all")
    tr.add_argument("--init", default=None,
                    help="checkpoint whose imaging backbone to load")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--split", default="all",
                    choices=("all", "validation", "in_study_test",
                             "out_study_test"))
    ev.add_argument("--modality", choices=("clin", "mri", "both"),
                    default="both")
    ev.add_argument("--tasks", choices=tuple(TASK_SETS), default="all")
    ev.add_argument("--allow-hash-mismatch", action="store_true")
    ev.set_defaults(fn=cmd_evaluate)

    st = sub.add_parser("stratify", help="tertile stratification table")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--data", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--config", default=None)
    st.add_argument("--modality", choices=("clin", "mri", "both"),
                    default="both")
    st.add_argument("--tasks", choices=tuple(TASK_SETS), default="all")
    st.set_defaults(fn=cmd_stratify)
    return p


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(rest)
        if getattr(args, "preset", None):
            overrides.setdefault("sim.preset", args.preset)
        cfg = resolve_config(getattr(args, "config", None), overrides)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NeuroprogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
