"""
Pytest configuration for the creative generation tests.

This file ensures the project root is on sys.path so tests can import creative_dp_utils.
Also provides common fixtures used across test modules: tiny-dimension configs,
fixture records, a vocabulary and a freshly initialized model.
"""

import sys
import json
import pytest
import tempfile
import shutil
from pathlib import Path
from unittest.mock import patch

# Add project root to sys.path so creative_dp_utils can be imported
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from creative_dp_utils.config import RunConfig  # noqa: E402
from creative_dp_utils.datamodel import Ad, DatasetRecord, Item  # noqa: E402


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line("markers", "integration: marks end-to-end pipeline tests")
    config.addinivalue_line("markers", "slow: marks tests that train for many steps")


@pytest.fixture(autouse=True)
def clean_environment():
    """Clear environment variables for test isolation (applied to all tests automatically)."""
    with patch.dict("os.environ", {}, clear=True):
        yield


@pytest.fixture
def temp_config_dir():
    """Create a temporary directory for test configs and study outputs."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


def tiny_config_dict(output_directory="output", **overrides):
    """Smallest dims that still exercise every network."""
    config = {
        "workflow": {"name": "test_creative_workflow", "seed": 0},
        "paths": {"output_directory": output_directory},
        "model": {
            "item_encoder": {"d_model": 8, "n_heads": 2, "n_layers": 1, "max_positions": 20, "ffn_multiplier": 2},
            "user_encoder": {"d_model": 8, "n_heads": 2, "n_layers": 1, "max_positions": 24, "ffn_multiplier": 2},
            "creative_decoder": {"d_model": 12, "n_heads": 2, "n_layers": 1, "max_positions": 96,
                                 "ffn_multiplier": 2},
            "predictor": {"n_layers": 1, "hidden_dim": 8},
        },
        "training": {
            "learning_rate": 0.01,
            "batch_size": 4,
            "max_history": 20,
            "max_item_tokens": 16,
            "max_ad_tokens": 32,
            "max_query_tokens": 8,
            "max_response_tokens": 16,
            "max_interest_tokens": 24,
        },
        "inference": {"num_clusters": 2, "topk_query_free": 2, "batch_size": 4},
        "decoding": {"max_new_tokens": 6},
        "llm": {"client": "mock", "retry_delay": 0.0, "max_retries": 2},
        "evaluation": {"eval_size": 4, "judge_max_concurrency": 2},
    }
    for section, values in overrides.items():
        if isinstance(values, dict) and isinstance(config.get(section), dict):
            config[section] = {**config[section], **values}
        else:
            config[section] = values
    return config


@pytest.fixture
def tiny_config():
    return RunConfig.model_validate(tiny_config_dict())


@pytest.fixture
def fixture_ads():
    return [
        Ad(ad_id="ad-1", original_title="waterproof hiking boots", selling_points=["free shipping", "two colors"],
           query="hiking gear"),
        Ad(ad_id="ad-2", original_title="quiet coffee grinder", selling_points=["easy returns"]),
    ]


@pytest.fixture
def fixture_records(fixture_ads):
    """Four records over two users with distinct histories."""
    outdoor = [Item(item_id=f"o{i}", title=title, attributes=[("category", "outdoor")])
               for i, title in enumerate(["trail backpack", "rain jacket", "camping tent"])]
    kitchen = [Item(item_id=f"k{i}", title=title, attributes=[("category", "kitchen")])
               for i, title in enumerate(["chef knife", "tea kettle"])]
    return [
        DatasetRecord(user_id="u1", history=outdoor, ad=fixture_ads[0], interest_text="likes camping and hiking",
                      response="waterproof hiking boots for camping", click_labels=[("o2", 1), ("k0", 0)]),
        DatasetRecord(user_id="u2", history=kitchen, ad=fixture_ads[0], interest_text="enjoys cooking at home",
                      response="waterproof hiking boots with free shipping"),
        DatasetRecord(user_id="u1", history=outdoor, ad=fixture_ads[1], interest_text="likes camping and hiking",
                      response="quiet coffee grinder for camping"),
        DatasetRecord(user_id="u2", history=kitchen, ad=fixture_ads[1], interest_text="enjoys cooking at home",
                      response="quiet coffee grinder for your kitchen"),
    ]


@pytest.fixture
def fixture_vocab(fixture_records, tiny_config):
    from creative_dp_utils.training import build_vocabulary

    return build_vocabulary(fixture_records, tiny_config)


@pytest.fixture
def tiny_model(tiny_config, fixture_vocab):
    from creative_dp_utils.modeling import build_model

    model = build_model(tiny_config, fixture_vocab)
    model.eval()
    return model


@pytest.fixture
def study_config_file(temp_config_dir):
    """Tiny study config written to disk, outputs under the temp dir."""
    config_path = temp_config_dir / "test_study_config.json"
    with open(config_path, "w") as f:
        json.dump(tiny_config_dict(output_directory=str(temp_config_dir / "study_output")), f, indent=4)
    return config_path
