#!/usr/bin/env python3
"""
Example search-ads study, full creative generation workflow runner.
"""

import sys
from pathlib import Path


def main():
    """Run the example search-ads workflow."""
    # Ensure project root is on sys.path so package `creative_dp_utils` is importable
    project_root = Path(__file__).resolve().parents[2]
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))
    from creative_dp_utils.datamodel import write_raw_logs
    from creative_dp_utils.synthetic import make_synthetic_logs
    from creative_dp_utils.workflow_manager import CreativeWorkflowManager

    # Initialize study manager
    config_path = Path(__file__).resolve().parent / "example_search_ads_config.json"
    manager = CreativeWorkflowManager(str(config_path))

    logger = manager.logger
    logger.info(f"=== {manager.workflow_name.upper()} WORKFLOW ===")

    # Step 1: Create workflow structure
    logger.info("1. Creating workflow structure...")
    manager.create_workflow_structure()

    raw_logs = manager.resolve_path(manager.config.paths.raw_logs)
    if not raw_logs.exists():
        logger.info(f"Writing synthetic click logs to {raw_logs}")
        write_raw_logs(make_synthetic_logs(200, n_users=100, seed=manager.config.workflow.seed), raw_logs)

    # Step 2: Construct the CoT dataset with the teacher LLM
    logger.info("2. Constructing personalized-title dataset...")
    manager.construct_dataset()
    assert manager.should_skip("dataset_built"), "Dataset construction must complete successfully to proceed"

    # Step 3: Train all networks jointly
    logger.info("3. Training the hierarchical creative model...")
    manager.train_model()
    assert manager.should_skip("model_trained"), "Training must complete successfully to proceed"

    # Step 4: Embed and cluster users
    logger.info("4. Extracting and clustering user embeddings...")
    manager.extract_embeddings()
    manager.cluster_users()
    assert manager.should_skip("users_clustered"), "User clustering must complete successfully to proceed"

    # Step 5: Batch generation in both modes
    logger.info("5. Generating query-free and query-aware creatives...")
    manager.run_query_free_generation()
    manager.run_query_aware_generation()

    # Step 6: Badcase filtering into the creative library
    logger.info("6. Filtering creatives into the library...")
    manager.filter_creatives()

    # Step 7: Offline evaluation
    logger.info("7. Evaluating generated titles...")
    manager.evaluate_creatives()


if __name__ == "__main__":
    main()
