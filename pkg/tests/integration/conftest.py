"""
Pytest configuration for integration tests.

Shared fixtures (tiny configs, temp dirs) come from tests/conftest.py.
"""

import json

import pytest

from conftest import tiny_config_dict


@pytest.fixture
def synthetic_study(temp_config_dir):
    """A study config whose raw logs are 24 synthetic rows over 6 users."""
    from creative_dp_utils.datamodel import write_raw_logs
    from creative_dp_utils.synthetic import make_synthetic_logs

    raw_logs = temp_config_dir / "raw_logs.jsonl"
    write_raw_logs(make_synthetic_logs(24, n_users=6, n_ads=4, history_length=5), raw_logs)
    config = tiny_config_dict(
        output_directory=str(temp_config_dir / "study_output"),
        paths={"raw_logs": str(raw_logs)},
        training={"max_steps": 6},
        llm={"client": "mock", "retry_delay": 0.0, "max_retries": 2, "mock_pass_modulus": 1},
    )
    config_path = temp_config_dir / "synthetic_study.json"
    config_path.write_text(json.dumps(config, indent=4))
    return config_path


@pytest.fixture
def smoke_study(temp_config_dir):
    """
    Factory for the smoke-chain study: 200 synthetic rows over 100 users, K = 8.
    Each call writes an independent study under its own subdirectory.
    """
    from creative_dp_utils.datamodel import write_raw_logs
    from creative_dp_utils.synthetic import make_synthetic_logs

    def make(name):
        study_dir = temp_config_dir / name
        study_dir.mkdir()
        raw_logs = study_dir / "raw_logs.jsonl"
        write_raw_logs(make_synthetic_logs(200, n_users=100, n_ads=6, history_length=5), raw_logs)
        config = tiny_config_dict(
            output_directory=str(study_dir / "study_output"),
            paths={"raw_logs": str(raw_logs)},
            training={"batch_size": 16, "epochs": 1},
            inference={"num_clusters": 8, "topk_query_free": 5, "topk_query_aware": 1, "batch_size": 16},
            llm={"client": "mock", "retry_delay": 0.0, "max_retries": 2, "mock_pass_modulus": 1},
        )
        config_path = study_dir / "smoke_study.json"
        config_path.write_text(json.dumps(config, indent=4))
        return config_path

    return make
