import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from drrquant.phantom import PhantomSpec, box, generate_phantom  # noqa: E402
from drrquant.volume_io import save_volume  # noqa: E402


def box_phantom_spec(lesion_depth_mm=100.0, lung_size=100.0, margin=10.0, spacing=1.0):
    """Box lung of ``lung_size`` mm with a 50 x depth x 50 mm box lesion in one corner.

    The lesion covers a quarter of the lung footprint; its AP extent is
    ``lesion_depth_mm`` starting at the lung's anterior face.
    """
    n = int(round((lung_size + 2 * margin) / spacing))
    lo, hi = margin, margin + lung_size
    lung = box((lo, lo, lo), (hi, hi, hi))
    lesion = box((lo, lo, lo), (lo + 50.0, lo + lesion_depth_mm, lo + 50.0))
    body = box((0, 0, 0), (n * spacing,) * 3)
    return PhantomSpec((n, n, n), (spacing,) * 3, lungs=(lung,), lesions=(lesion,), body=body)


@pytest.fixture
def write_case(tmp_path):
    """Write a phantom as a manifest case; returns the case dict (paths relative to tmp_path)."""

    def _write(case_id, spec):
        volume, lung, lesion, truth = generate_phantom(spec)
        d = tmp_path / case_id
        d.mkdir()
        save_volume(volume, d / "ct.mha")
        save_volume(lung, d / "lung.mha")
        save_volume(lesion, d / "lesion.mha")
        return {
            "case_id": case_id,
            "ct_path": f"{case_id}/ct.mha",
            "lung3d_path": f"{case_id}/lung.mha",
            "lesion3d_path": f"{case_id}/lesion.mha",
        }

    return _write


@pytest.fixture
def write_manifest(tmp_path):
    def _write(cases, config=None, name="manifest.json"):
        body = {"cases": cases}
        if config is not None:
            body["config"] = config
        p = tmp_path / name
        p.write_text(json.dumps(body, indent=2))
        return p

    return _write


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_spec(w, h, depth=40, lesion_y0=4):
    """40 x 48 x 40 mm grid, 32 x 40 x 32 mm box lung; lesion box w x depth x h in a corner."""
    lung = box((4, 4, 4), (36, 44, 36))
    lesions = (box((4, lesion_y0, 4), (4 + w, lesion_y0 + depth, 4 + h)),) if w and h else ()
    return PhantomSpec((40, 48, 40), (1.0, 1.0, 1.0), lungs=(lung,), lesions=lesions)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
