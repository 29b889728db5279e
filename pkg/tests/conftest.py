import numpy as np
import pytest

from atomizer.modality_forge import band_index, sentinel2_bands
from atomizer.position_codec import FourierConfig, PositionConfig
from atomizer.tokenizer import Codecs, ModalityConfig, Sample


@pytest.fixture
def small_codecs():
    f = FourierConfig(4, 4.0)
    return Codecs(PositionConfig(f, 10.0), f)


def make_modality(h=4, w=4, names=("B02", "B04", "B8A"), gsd=10.0, name="m"):
    cat = sentinel2_bands()
    return ModalityConfig(tuple(cat[band_index(n)] for n in names), gsd, h, w, name)


def make_sample(seed=0, h=4, w=4, names=("B02", "B04", "B8A"), gsd=10.0, classes=3, name="m"):
    rng = np.random.default_rng(seed)
    m = make_modality(h, w, names, gsd, name)
    cube = rng.uniform(0, 1, (h, w, len(names))).astype(np.float32)
    target = (rng.random(classes) < 0.5).astype(np.float32)
    return Sample(cube, m, target, f"s{seed}")


# acceptance summary: one PASS/FAIL line per criterion marker

_CRITERIA: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "details": []})
    entry["ok"] &= report.passed
    entry["seconds"] += report.duration
    entry["details"] += [v for k, v in report.user_properties if k == "measured"]


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {e['title']}  ({e['seconds']:.1f} s)")
        for detail in e["details"]:
            terminalreporter.write_line(f"    {detail}")
