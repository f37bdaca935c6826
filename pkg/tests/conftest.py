"""共用 fixture：手工樣本、合成場景與小型模型設定"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data_ingest import build_cases  # noqa: E402
from predictor import ModelConfig  # noqa: E402
from scenario_core import PolylineKind, normalize_case  # noqa: E402
from synthetic_oracle import SynthKind, SynthSpec, generate  # noqa: E402
from tests.factories import lane_polyline, make_case, straight_track  # noqa: E402


@pytest.fixture
def case_factory():
    return make_case


@pytest.fixture
def normalized_case():
    agent = straight_track((-10.0, 3.5), 4.0, 0.0, 10)
    return normalize_case(make_case(
        t_h=10, t_f=6, speed=2.0, start=(5.0, 1.0),
        agents={2: agent},
        map_polylines=(lane_polyline(1, 1.75), lane_polyline(2, -1.75, PolylineKind.LANE_MARKING)),
    ))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(hidden_dim=8, num_layers=2, t_h=10, t_f=6)


@pytest.fixture(scope="session")
def straight_scenario():
    return generate(SynthSpec(kind=SynthKind.STRAIGHT_LANE, agent_count=3,
                              duration_frames=30, recording_count=4, seed=3))


@pytest.fixture(scope="session")
def straight_cases(straight_scenario):
    return build_cases(straight_scenario.tracks, straight_scenario.polylines,
                       t_h=10, t_f=6, normalize=True, scenario_name='straight-lane')
