import numpy as np
import pytest

from terravario.survey_data import SurveyDataset, feature_columns


def make_dataset(n=20, d=4, seed=0, fairway_id="fw", x=None, y=None, t=None, speed=None, ecar=None):
    """Small dataset with local coordinates, for filter and harness tests."""
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=float) if t is None else np.asarray(t, dtype=float)
    x = np.arange(n, dtype=float) if x is None else x
    y = np.zeros(n) if y is None else y
    return SurveyDataset(
        time_s=t,
        features=rng.standard_normal((len(t), d)),
        ecar=rng.standard_normal(len(t)) if ecar is None else ecar,
        x_m=x,
        y_m=y,
        speed_mps=np.ones(len(t)) if speed is None else speed,
        fairway_id=fairway_id,
    )


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


@pytest.fixture
def merged_header():
    def make(n_steps=3, speed=True):
        return ["time_s", "lat_deg", "lon_deg"] + (["speed_mps"] if speed else []) + ["ecar"] + feature_columns(n_steps)
    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
