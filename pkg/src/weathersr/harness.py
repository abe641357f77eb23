"""Training, evaluation and sampling drivers behind the command-line interface."""
from __future__ import annotations

import csv
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_date
from .denoiser import build_model
from .engine import make_train_state, sample_batch, training_step
from .errors import ConfigurationError, ContractError, NumericError
from .grid import (
    KELVIN,
    LR_SPACING_DEG,
    NETCDF_ENGINE,
    SCALE,
    GridField,
    PairedDataset,
    StandardizationStats,
    destandardize,
    load_pairs,
    standardize,
    synth_dataset,
)
from .interp import initial_prediction
from .metrics import MetricsReport, evaluate_fields
from .schedule import NoiseSchedule, make_linear_schedule

logger = logging.getLogger(__name__)

IDENTITY_STATS = StandardizationStats(0.0, 1.0, 0.0, 1.0)
METRIC_FIELDS = ("mse", "mae", "psnr", "ssim")
CSV_FIELDS = (["iteration", "train_loss"] + list(METRIC_FIELDS) + ["n_samples", "data_range"]
              + [f"bicubic_{k}" for k in METRIC_FIELDS])


@dataclass
class DataBundle:
    kind: str
    train: PairedDataset | None
    validation: PairedDataset
    stats: StandardizationStats


def load_data(cfg: RunConfig, need_train: bool = True) -> DataBundle:
    d = cfg.data
    if d["synthetic"]:
        train = None
        if need_train:
            train = synth_dataset(range(cfg.seed, cfg.seed + int(d["n_train"])), float(d["smoothness"]))
        off = int(d["validation_offset"])
        val = synth_dataset(range(off, off + int(d["n_validation"])), float(d["smoothness"]),
                            split="validation")
        return DataBundle("synthetic", train, val, IDENTITY_STATS)
    month = d["month"]
    kw = dict(variable=d["variable"], month_filter=int(month) if month else None)
    raw_train = load_pairs(d["lr_path"], d["hr_path"], date_start=parse_date(d["train_start"]),
                           date_end=parse_date(d["train_end"]), split="train", **kw)
    train = standardize(raw_train)
    raw_val = load_pairs(d["lr_path"], d["hr_path"], date_start=parse_date(d["validation_start"]),
                         date_end=parse_date(d["validation_end"]), split="validation", **kw)
    val = standardize(raw_val, train.stats)
    return DataBundle("netcdf", train if need_train else None, val, train.stats)


def hr_data_range(ds: PairedDataset, stats: StandardizationStats) -> float:
    lo = min(float(s.hr.values.min()) for s in ds)
    hi = max(float(s.hr.values.max()) for s in ds)
    return (hi - lo) * stats.std_hr


def _to_kelvin(arr: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    return destandardize(GridField(arr), stats, "hr").values


Sampler = Callable[[torch.Tensor, int], torch.Tensor]


def model_sampler(model, sched: NoiseSchedule, stats: StandardizationStats) -> Sampler:
    def run(lr: torch.Tensor, seed: int) -> torch.Tensor:
        return sample_batch(model, lr, sched, seed, stats, use_ema=True).final
    return run


def predict_dataset(sampler: Sampler, ds: PairedDataset, seed: int, batch_size: int,
                    max_samples: int | None = None) -> list[np.ndarray]:
    """Standardized HR predictions, one seeded sampler call per batch."""
    n = len(ds) if max_samples is None else min(len(ds), int(max_samples))
    preds = []
    for b, start in enumerate(range(0, n, batch_size)):
        items = ds.samples[start:min(n, start + batch_size)]
        lr = torch.as_tensor(np.stack([s.lr.values for s in items]), dtype=torch.float32)[:, None]
        out = sampler(lr, seed + b)
        preds.extend(out[:, 0].detach().cpu().numpy().astype(np.float64))
    return preds


def evaluate_dataset(sampler: Sampler, ds: PairedDataset, stats: StandardizationStats, seed: int,
                     batch_size: int, max_samples: int | None = None,
                     data_range: float | None = None) -> tuple[MetricsReport, MetricsReport, list]:
    """(model report, bicubic baseline report, kelvin predictions)."""
    preds = predict_dataset(sampler, ds, seed, batch_size, max_samples)
    items = ds.samples[:len(preds)]
    if data_range is None:
        data_range = hr_data_range(ds, stats)
    refs = [_to_kelvin(s.hr.values, stats) for s in items]
    preds_k = [_to_kelvin(p, stats) for p in preds]
    base = [_to_kelvin(initial_prediction(np.asarray(s.lr.values, dtype=np.float64), stats), stats)
            for s in items]
    return (evaluate_fields(preds_k, refs, data_range), evaluate_fields(base, refs, data_range), preds_k)


# ---------------------------------------------------------------------------
# train


@contextmanager
def run_lock(run_dir: str):
    path = os.path.join(run_dir, "train.lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ContractError(f"another training process holds {path}") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        os.remove(path)


def _append_csv(path: str, row: dict) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def plot_validation_curve(csv_path: str, out_path: str, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics_csv(csv_path)
    its = [r["iteration"] for r in rows]
    fig, axes = plt.subplots(1, 4, figsize=(16, 3.5))
    for ax, key in zip(axes, METRIC_FIELDS):
        ax.plot(its, [r[key] for r in rows], marker="o", label="model")
        ax.plot(its, [r[f"bicubic_{key}"] for r in rows], ls="--", label="bicubic")
        ax.set_title(key.upper())
        ax.set_xlabel("iteration")
    axes[0].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def cmd_train(config_path: str | None = None, resume: str | None = None, **overrides) -> str:
    """Run training; returns the run directory."""
    cfg = load_config(config_path, **overrides)
    run_dir = cfg.output_dir
    os.makedirs(run_dir, exist_ok=True)
    with run_lock(run_dir):
        return _train(cfg, run_dir, resume)


def _train(cfg: RunConfig, run_dir: str, resume: str | None) -> str:
    tr = cfg.train
    data = load_data(cfg)
    cfg.dump(os.path.join(run_dir, "config.yaml"))
    data.stats.save(os.path.join(run_dir, "stats.txt"))
    sched = make_linear_schedule(int(cfg.schedule["T"]), float(cfg.schedule["beta_start"]),
                                 float(cfg.schedule["beta_end"]))
    adam = dict(learning_rate=float(tr["learning_rate"]), betas=tuple(tr["adam_betas"]),
                eps=float(tr["adam_eps"]))
    if resume:
        ck = load_checkpoint(resume)
        if ck.config.variant != cfg.variant:
            raise ContractError(f"checkpoint variant {ck.config.variant} != config variant {cfg.variant}")
        state = ck.train_state(**adam)
        state.ema_decay = float(tr["ema_decay"])
        ck.restore_global_rng()
        logger.info("resumed from %s at iteration %d", resume, state.iteration)
    else:
        torch.manual_seed(cfg.seed)
        model = build_model(cfg.denoiser_config(), cfg.seed)
        state = make_train_state(model, adam["learning_rate"], cfg.seed, float(tr["ema_decay"]),
                                 data.stats, adam["betas"], adam["eps"])
    state.stats = data.stats

    val_cfg = cfg.validation
    data_range = hr_data_range(data.validation, data.stats)
    csv_path = os.path.join(run_dir, "metrics.csv")
    iterations, every, bs = int(tr["iterations"]), int(tr["validate_every"]), cfg.batch_size
    losses: list[float] = []
    t0 = time.time()
    while state.iteration < iterations:
        idx = torch.randint(len(data.train), (bs,), generator=state.generator).tolist()
        idx.sort()
        batch = [data.train[i] for i in idx]
        try:
            state, loss = training_step(state, batch, sched)
        except NumericError:
            save_checkpoint(os.path.join(run_dir, "failure.pt"), state, sched, cfg.raw, data.kind)
            raise
        losses.append(loss)
        if state.iteration % int(tr["log_every"]) == 0:
            logger.info("iter %d loss %.4f (%.1fs)", state.iteration, float(np.mean(losses[-50:])),
                        time.time() - t0)
        if state.iteration % every == 0:
            sampler = model_sampler(state.model, sched, data.stats)
            rep, base, _ = evaluate_dataset(sampler, data.validation, data.stats, int(val_cfg["seed"]),
                                            int(val_cfg["batch_size"]), val_cfg["max_samples"], data_range)
            row = {"iteration": state.iteration, "train_loss": float(np.mean(losses[-every:]))}
            row.update({k: getattr(rep, k) for k in METRIC_FIELDS})
            row.update(n_samples=rep.n_samples, data_range=rep.data_range)
            row.update({f"bicubic_{k}": getattr(base, k) for k in METRIC_FIELDS})
            _append_csv(csv_path, row)
            ck_path = os.path.join(run_dir, f"ckpt_{state.iteration:07d}.pt")
            save_checkpoint(ck_path, state, sched, cfg.raw, data.kind)
            with open(os.path.join(run_dir, f"report_{state.iteration:07d}.txt"), "w") as fh:
                fh.write(rep.to_text())
            logger.info("validation @%d: mse %.4g ssim %.4f psnr %.2f mae %.4g (bicubic mse %.4g ssim %.4f)",
                        state.iteration, rep.mse, rep.ssim, rep.psnr, rep.mae, base.mse, base.ssim)
    if os.path.exists(csv_path):
        plot_validation_curve(csv_path, os.path.join(run_dir, "validation_curve.png"), cfg.variant)
    return run_dir


# ---------------------------------------------------------------------------
# data specs for evaluate / sample


def _spec_kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, body.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise ConfigurationError(f"malformed data spec entry {part!r}")
        out[k.strip()] = v.strip()
    return out


@dataclass
class InputSet:
    kind: str
    lr: list[GridField]
    hr: list[GridField] | None
    dataset: PairedDataset | None


def parse_data_spec(spec: str, ck: Checkpoint) -> InputSet:
    """Resolve ``synthetic:...``, ``netcdf:...``, ``lr:PATH,...`` or a config file path."""
    stats = ck.stats or IDENTITY_STATS
    kind, _, body = spec.partition(":")
    if kind == "synthetic":
        kv = _spec_kv(body)
        n, off = int(kv.get("n", 4)), int(kv.get("offset", 100000))
        ds = synth_dataset(range(off, off + n), float(kv.get("smoothness", 4.0)), split="validation")
        out = InputSet("synthetic", [s.lr for s in ds], [s.hr for s in ds], ds)
    elif kind == "netcdf":
        kv = _spec_kv(body)
        try:
            raw = load_pairs(kv["lr"], kv["hr"], kv.get("variable", "t2m"), parse_date(kv["start"]),
                             parse_date(kv["end"]), int(kv["month"]) if "month" in kv else None,
                             split="validation")
        except KeyError as exc:
            raise ConfigurationError(f"netcdf spec lacks {exc}") from None
        ds = standardize(raw, stats)
        out = InputSet("netcdf", [s.lr for s in ds], [s.hr for s in ds], ds)
    elif kind == "lr":
        kv = _spec_kv(body.split(",", 1)[1]) if "," in body else {}
        path = body.split(",", 1)[0]
        fields = read_lr_archive(path, kv.get("variable", "t2m"), int(kv["max"]) if "max" in kv else None)
        fields = [f.replace(values=(f.values - stats.mean_lr) / stats.std_lr, units="standardized")
                  if f.units == KELVIN else f for f in fields]
        out = InputSet("netcdf", fields, None, None)
    elif os.path.exists(spec):
        cfg = load_config(spec)
        if cfg.data["synthetic"]:
            d = cfg.data
            return parse_data_spec(f"synthetic:n={d['n_validation']},offset={d['validation_offset']},"
                                   f"smoothness={d['smoothness']}", ck)
        data = load_data(cfg, need_train=False)
        ds = data.validation
        out = InputSet("netcdf", [s.lr for s in ds], [s.hr for s in ds], ds)
    else:
        raise ConfigurationError(f"unrecognised data spec {spec!r}")

    if out.kind != ck.data_kind:
        raise ContractError(f"checkpoint was trained on {ck.data_kind} data but got {out.kind} data")
    factor = 2 ** (len(ck.config.channel_mults) - 1)
    for f in out.lr:
        h, w = f.shape
        if (SCALE * h) % factor or (SCALE * w) % factor:
            raise ContractError(f"LR shape {f.shape} incompatible with the checkpoint's U-Net depth")
    return out


def read_lr_archive(path: str, variable: str = "t2m", limit: int | None = None) -> list[GridField]:
    import xarray as xr

    from .grid import _expand_paths, _to_utc_datetimes

    fields = []
    for fname in _expand_paths(path):
        with xr.open_dataset(fname, engine=NETCDF_ENGINE) as ds:
            if variable not in ds.variables:
                raise ConfigurationError(f"variable {variable!r} missing from {fname}")
            da = ds[variable]
            if "time" in da.dims:
                da = da.transpose("time", ...)
                stamps = _to_utc_datetimes(np.asarray(da["time"].values))
                vals = np.asarray(da.values, dtype=np.float64)
            else:
                stamps, vals = [None], np.asarray(da.values, dtype=np.float64)[None]
            units = KELVIN if str(da.attrs.get("units", "K")) in ("K", "kelvin") else "standardized"
            for ts, v in zip(stamps, vals):
                fields.append(GridField(v, units, LR_SPACING_DEG, ts))
                if limit is not None and len(fields) >= limit:
                    return fields
    return fields


# ---------------------------------------------------------------------------
# evaluate / sample


def cmd_evaluate(checkpoint: str, data_spec: str, seed: int = 0, batch_size: int = 4,
                 sampler: Sampler | None = None) -> dict[str, MetricsReport]:
    ck = load_checkpoint(checkpoint)
    inputs = parse_data_spec(data_spec, ck)
    if inputs.dataset is None:
        raise ContractError("evaluation needs HR references")
    stats = ck.stats or IDENTITY_STATS
    if sampler is None:
        sampler = model_sampler(ck.model(), ck.schedule, stats)
    rep, base, _ = evaluate_dataset(sampler, inputs.dataset, stats, seed, batch_size)
    return {"model": rep, "bicubic": base}


def format_reports(reports: dict[str, MetricsReport]) -> str:
    lines = [f"{'':10s}" + "".join(f"{k:>12s}" for k in METRIC_FIELDS)]
    for name, rep in reports.items():
        lines.append(f"{name:10s}" + "".join(f"{getattr(rep, k):12.5g}" for k in METRIC_FIELDS))
    any_rep = next(iter(reports.values()))
    lines.append(f"n_samples = {any_rep.n_samples}, data_range = {any_rep.data_range:.6g}")
    return "\n".join(lines) + "\n"


def grid_coords(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    dlat, dlon = 180.0 / h, 360.0 / w
    return -90.0 + dlat * (np.arange(h) + 0.5), dlon * np.arange(w)


def write_field_netcdf(path: str, values: np.ndarray, variable: str = "t2m", units: str = "K",
                       timestamp=None) -> None:
    import xarray as xr

    lat, lon = grid_coords(values.shape)
    da = xr.DataArray(values.astype(np.float32), dims=("lat", "lon"),
                      coords={"lat": lat, "lon": lon}, attrs={"units": units})
    ds = xr.Dataset({variable: da})
    if timestamp is not None:
        ds.attrs["valid_time"] = timestamp.isoformat()
    ds.to_netcdf(path, engine=NETCDF_ENGINE)


def render_map(path: str, values: np.ndarray, title: str, cmap: str = "coolwarm", label: str = "K") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lat, lon = grid_coords(values.shape)
    fig, ax = plt.subplots(figsize=(8, 4))
    mesh = ax.pcolormesh(lon, lat, values, cmap=cmap, shading="auto")
    fig.colorbar(mesh, ax=ax, label=label)
    ax.set_title(title)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_sample(checkpoint: str, input_spec: str, out_dir: str, seed: int = 0,
               sampler: Sampler | None = None) -> list[str]:
    ck = load_checkpoint(checkpoint)
    inputs = parse_data_spec(input_spec, ck)
    stats = ck.stats or IDENTITY_STATS
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc
    if sampler is None:
        sampler = model_sampler(ck.model(), ck.schedule, stats)

    written = []
    for i, lr in enumerate(inputs.lr):
        lr_t = torch.tensor(np.asarray(lr.values), dtype=torch.float32)[None, None]
        pred = _to_kelvin(sampler(lr_t, seed + i)[0, 0].cpu().numpy().astype(np.float64), stats)
        stem = os.path.join(out_dir, f"sample_{i:04d}")
        write_field_netcdf(stem + ".nc", pred, timestamp=lr.timestamp)
        render_map(stem + "_map.png", pred, f"super-resolved ({ck.config.variant})")
        written += [stem + ".nc", stem + "_map.png"]
        if inputs.hr is not None:
            ref = _to_kelvin(np.asarray(inputs.hr[i].values, dtype=np.float64), stats)
            render_map(stem + "_abs_error.png", np.abs(pred - ref), "absolute error", cmap="magma")
            written.append(stem + "_abs_error.png")
    return written
