import numpy as np
import pytest
import torch

from weathersr.denoiser import DenoiserConfig, build_model
from weathersr.schedule import make_linear_schedule


def tiny_config(variant="resdiff", base=8, **kw):
    """Small U-Net whose bottleneck sits at 1/8 resolution (cheap attention)."""
    kw.setdefault("channel_mults", [1, 2, 2, 2])
    kw.setdefault("resnet_blocks_per_level", 1)
    kw.setdefault("attention_levels", [3])
    kw.setdefault("dropout", 0.0)
    return DenoiserConfig(variant=variant, base_channels=base, **kw)


def randomize_output(model, seed=0, scale=0.05):
    """Replace the zero-initialised output conv so gradients reach every layer."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for net in (model.net, model.ema_net):
            net.out.weight.copy_(torch.randn(net.out.weight.shape, generator=g) * scale)
            net.out.bias.fill_(0.01)
    return model


def tiny_run_overrides(out_dir, variant="resdiff", iterations=4, every=2, T=5, n_val=2):
    return {
        "variant": variant,
        "output_dir": str(out_dir),
        "data": {"synthetic": True, "n_train": 8, "n_validation": n_val},
        "schedule": {"T": T, "beta_start": 1e-4, "beta_end": 0.2},
        "model": {"base_channels": 8, "channel_mults": [1, 2, 2, 2], "resnet_blocks_per_level": 1,
                  "attention_levels": [3]},
        "train": {"iterations": iterations, "validate_every": every, "batch_size": 2, "log_every": 1},
        "validation": {"batch_size": 2},
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_sched():
    return make_linear_schedule(10, 1e-4, 0.2)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config("resdiff"), seed=0)


def write_archive(path, times, shape, fill, variable="t2m"):
    """Write a (time, lat, lon) NetCDF file; ``fill(i)`` gives the i-th record."""
    import xarray as xr

    data = np.stack([fill(i) for i in range(len(times))]).astype(np.float32)
    h, w = shape
    ds = xr.Dataset(
        {variable: (("time", "lat", "lon"), data)},
        coords={"time": np.array(times, dtype="datetime64[ns]"),
                "lat": np.linspace(-87.0, 87.0, h), "lon": np.linspace(0.0, 360.0, w, endpoint=False)},
    )
    ds[variable].attrs["units"] = "K"
    ds.to_netcdf(path)
    return path


# one PASS/FAIL line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
