import asyncio
import json
from functools import wraps
from pathlib import Path
from typing import List, Optional, Sequence, Union

from dotenv import load_dotenv

from creative_dp_utils.datagen import build_dataset
from creative_dp_utils.datamodel import (
    Ad,
    CreativeCandidate,
    DatasetRecord,
    GenerationMode,
    collect_ads,
    read_ads,
    read_candidates,
    read_raw_logs,
    read_records,
    write_jsonl,
    write_records,
)
from creative_dp_utils.evaluation import (
    GSBCounts,
    JudgeContext,
    advantage,
    evaluate_gsb,
    format_percent,
    generate_for_records,
    hallucination_pass_rate,
    load_grid,
    aux_loss_grid,
    read_titles,
    render_table,
    run_ablation_report,
    write_report,
)
from creative_dp_utils.inference import (
    NO_CLUSTERING,
    ClusterModel,
    CreativeLibrary,
    UserEmbeddings,
    apply_badcase_filter,
    default_rules,
    extract_user_embeddings,
    generate_from_plans,
    identity_clustering,
    kmeans,
    plan_generation,
    read_plans,
    users_from_records,
    write_plans,
)
from creative_dp_utils.llm.llm_client import build_llm_client
from creative_dp_utils.llm.llm_pipeline import RetryPolicy
from creative_dp_utils.modeling import HierarchicalCreativeModel
from creative_dp_utils.training import (
    Checkpoint,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics,
)

# Load environment variables from .env file
load_dotenv()

PathLike = Union[str, Path]


def skip_if_complete(trigger_name: str, return_value=None):
    """
    Decorator to skip a method if the specified trigger is set to True.

    Compatible with both sync and async functions.

    Args:
        trigger_name: Name of the skip trigger to check
        return_value: Value to return if skipping (default: None)

    Usage:
        @skip_if_complete('model_trained', return_value=True)
        def train_model(self):
            ...
    """

    def decorator(func):
        if asyncio.iscoroutinefunction(func):
            @wraps(func)
            async def async_wrapper(self, *args, **kwargs):
                if self.should_skip(trigger_name):
                    self.logger.info(f"Skipping {func.__name__} ({trigger_name} already complete)")
                    return return_value
                return await func(self, *args, **kwargs)
            return async_wrapper
        else:
            @wraps(func)
            def sync_wrapper(self, *args, **kwargs):
                if self.should_skip(trigger_name):
                    self.logger.info(f"Skipping {func.__name__} ({trigger_name} already complete)")
                    return return_value
                return func(self, *args, **kwargs)
            return sync_wrapper

    return decorator


def _mode_filename(mode: Union[GenerationMode, str]) -> str:
    return f"{GenerationMode(mode).value}.jsonl"


class DatasetConstructionManager:
    """
    Mixin class providing CoT dataset construction for creative studies.
    """

    @property
    def dataset_path(self) -> Path:
        """The configured dataset, or the one this study builds."""
        return self.resolve_path(self.config.paths.dataset) or self.study_path("records", "dataset.jsonl")

    def load_records(self, dataset_path: Optional[PathLike] = None) -> List[DatasetRecord]:
        path = Path(dataset_path) if dataset_path else self.dataset_path
        return read_records(path, max_history=self.config.training.max_history)

    def load_eval_records(self, eval_path: Optional[PathLike] = None) -> List[DatasetRecord]:
        """Evaluation split: the configured one, else the first ``eval_size`` dataset records."""
        path = Path(eval_path) if eval_path else self.resolve_path(self.config.paths.eval_dataset)
        if path is not None:
            return read_records(path, max_history=self.config.training.max_history)
        return self.load_records()[: self.config.evaluation.eval_size]

    @skip_if_complete("dataset_built", return_value=True)
    def construct_dataset(self, raw_logs_path: Optional[PathLike] = None,
                          output_path: Optional[PathLike] = None) -> bool:
        """
        Run profiling, title generation and the hallucination filter over the raw logs.

        Writes the dataset, the per-stage statistics (records/datagen_stats.json)
        and the quarantined rows (records/quarantine.jsonl).

        Returns:
            True if the dataset was written, False otherwise
        """
        try:
            raw_logs_path = Path(raw_logs_path) if raw_logs_path else self.resolve_path(self.config.paths.raw_logs)
            if raw_logs_path is None:
                raise ValueError("no raw logs configured (paths.raw_logs)")
            output_path = Path(output_path) if output_path else self.study_path("records", "dataset.jsonl")
            rows = read_raw_logs(raw_logs_path, max_history=self.config.training.max_history)
            self.logger.info(f"Constructing dataset from {len(rows)} log rows with {self.config.llm.client} teacher")

            records, stats = build_dataset(
                rows, self.llm_client, self.config.llm,
                quarantine_path=output_path.parent / "quarantine.jsonl", show_progress=True,
            )
            write_records(records, output_path)
            stats_path = output_path.parent / "datagen_stats.json"
            stats_path.write_text(json.dumps(stats.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
            self.logger.info(f"Wrote {len(records)} records to {output_path}")
            self.set_skip_trigger("dataset_built", True)
            return True
        except Exception as e:
            self.logger.error(f"Error constructing dataset: {e}")
            return False


class ModelTrainingManager:
    """
    Mixin class providing joint training and checkpoint handling.
    """

    @property
    def checkpoint_path(self) -> Path:
        return self.study_path("checkpoints", "final.ckpt")

    def load_trained_checkpoint(self, checkpoint_path: Optional[PathLike] = None) -> Checkpoint:
        return load_checkpoint(Path(checkpoint_path) if checkpoint_path else self.checkpoint_path)

    def load_trained_model(self, checkpoint_path: Optional[PathLike] = None) -> HierarchicalCreativeModel:
        model = self.load_trained_checkpoint(checkpoint_path).build_model()
        model.eval()
        return model

    @skip_if_complete("model_trained", return_value=True)
    def train_model(self, dataset_path: Optional[PathLike] = None, checkpoint_path: Optional[PathLike] = None,
                    resume_path: Optional[PathLike] = None, stop_after: Optional[int] = None) -> bool:
        """
        Train on the dataset and write the final checkpoint, its vocabulary and
        the per-step metrics log next to it.

        Returns:
            True if training finished and the checkpoint was saved, False otherwise
        """
        try:
            records = self.load_records(dataset_path)
            checkpoint_path = Path(checkpoint_path) if checkpoint_path else self.checkpoint_path
            resume_from = load_checkpoint(resume_path) if resume_path else None
            if resume_from is not None:
                self.logger.info(f"Resuming from {resume_path} at step {resume_from.step}")

            ckpt = train(records, self.config, resume_from=resume_from, checkpoint_dir=checkpoint_path.parent,
                         stop_after=stop_after, show_progress=True)
            save_checkpoint(ckpt, checkpoint_path)
            ckpt.vocab.save(checkpoint_path.parent / "vocab.txt")
            write_metrics(ckpt.metrics, checkpoint_path.parent / "metrics.jsonl")
            last = ckpt.metrics[-1] if ckpt.metrics else {}
            self.logger.info(f"Saved checkpoint {checkpoint_path} at step {ckpt.step} (last losses {last})")
            self.set_skip_trigger("model_trained", True)
            return True
        except TrainingDivergedError as e:
            self.logger.error(f"Training diverged at step {e.step}: {e.losses}")
            return False
        except Exception as e:
            self.logger.error(f"Error training model: {e}")
            return False


class CreativeInferenceManager:
    """
    Mixin class providing the clustered batch-inference workflow:
    embeddings -> clusters -> plans -> candidates -> filtered library.
    """

    @property
    def embeddings_path(self) -> Path:
        return self.study_path("embeddings", "users.npz")

    @property
    def clusters_path(self) -> Path:
        return self.study_path("clusters", "clusters.npz")

    @property
    def library_path(self) -> Path:
        return self.study_path("library", "creatives.jsonl")

    def load_ads(self, ads_path: Optional[PathLike] = None) -> List[Ad]:
        """Configured ads file, else the unique ads of the dataset."""
        path = Path(ads_path) if ads_path else self.resolve_path(self.config.paths.ads)
        if path is not None:
            return read_ads(path)
        return collect_ads(self.load_records())

    @skip_if_complete("user_embeddings_extracted", return_value=True)
    def extract_embeddings(self, dataset_path: Optional[PathLike] = None, checkpoint_path: Optional[PathLike] = None,
                           output_path: Optional[PathLike] = None) -> bool:
        try:
            model = self.load_trained_model(checkpoint_path)
            users = users_from_records(self.load_records(dataset_path))
            embeddings = extract_user_embeddings(users, model, batch_size=self.config.inference.batch_size,
                                                 show_progress=True)
            output_path = Path(output_path) if output_path else self.embeddings_path
            embeddings.save(output_path)
            self.logger.info(
                f"Extracted {len(embeddings.user_ids)} user embeddings to {output_path} ({embeddings.skipped} skipped)"
            )
            self.set_skip_trigger("user_embeddings_extracted", True)
            return True
        except Exception as e:
            self.logger.error(f"Error extracting user embeddings: {e}")
            return False

    @skip_if_complete("users_clustered", return_value=True)
    def cluster_users(self, embeddings_path: Optional[PathLike] = None, output_path: Optional[PathLike] = None,
                      k: Optional[Union[int, str]] = None) -> bool:
        """
        k-means over the user embeddings; k="inf" keeps one cluster per user.
        k above the number of users is clamped with a warning.
        """
        try:
            embeddings = UserEmbeddings.load(Path(embeddings_path) if embeddings_path else self.embeddings_path)
            k = k if k is not None else self.config.inference.num_clusters
            if str(k) == NO_CLUSTERING:
                clusters = identity_clustering(embeddings.vectors, embeddings.user_ids)
            else:
                k = int(k)
                if k > len(embeddings.user_ids):
                    self.logger.warning(f"num_clusters {k} exceeds {len(embeddings.user_ids)} users; clamping")
                    k = len(embeddings.user_ids)
                clusters = kmeans(
                    embeddings.vectors, k, max_iters=self.config.inference.kmeans_max_iters,
                    seed=self.config.workflow.seed, init=self.config.inference.kmeans_init,
                    user_ids=embeddings.user_ids,
                )
            output_path = Path(output_path) if output_path else self.clusters_path
            clusters.save(output_path)
            self.logger.info(
                f"Clustered {len(embeddings.user_ids)} users into {clusters.k} clusters "
                f"(inertia {clusters.inertia:.4f}, {clusters.n_iter} iterations)"
            )
            self.set_skip_trigger("users_clustered", True)
            return True
        except Exception as e:
            self.logger.error(f"Error clustering users: {e}")
            return False

    def plan_creatives(self, mode: Union[GenerationMode, str], ads_path: Optional[PathLike] = None,
                       checkpoint_path: Optional[PathLike] = None, clusters_path: Optional[PathLike] = None,
                       output_path: Optional[PathLike] = None) -> bool:
        """Score clusters for every ad and persist the top-k selections as plans."""
        try:
            model = self.load_trained_model(checkpoint_path)
            clusters = ClusterModel.load(Path(clusters_path) if clusters_path else self.clusters_path)
            plans, skipped = plan_generation(self.load_ads(ads_path), clusters, model, GenerationMode(mode),
                                             self.config.inference)
            output_path = Path(output_path) if output_path else self.study_path("plans", _mode_filename(mode))
            write_plans(plans, output_path)
            self.logger.info(f"Wrote {len(plans)} {GenerationMode(mode).value} plans to {output_path} "
                             f"({len(skipped)} ads skipped)")
            return True
        except Exception as e:
            self.logger.error(f"Error planning {mode} generation: {e}")
            return False

    def generate_creatives(self, mode: Union[GenerationMode, str], plans_path: Optional[PathLike] = None,
                           ads_path: Optional[PathLike] = None, checkpoint_path: Optional[PathLike] = None,
                           clusters_path: Optional[PathLike] = None, output_path: Optional[PathLike] = None) -> bool:
        """Decode one candidate per planned (ad, cluster[, query])."""
        try:
            model = self.load_trained_model(checkpoint_path)
            clusters = ClusterModel.load(Path(clusters_path) if clusters_path else self.clusters_path)
            plans = read_plans(Path(plans_path) if plans_path else self.study_path("plans", _mode_filename(mode)))
            plans = [plan for plan in plans if plan.mode == GenerationMode(mode)]
            ads = {ad.ad_id: ad for ad in self.load_ads(ads_path)}
            missing = sorted({plan.ad_id for plan in plans} - set(ads))
            if missing:
                raise ValueError(f"plans reference unknown ads: {missing[:5]}")
            candidates = generate_from_plans(plans, ads, clusters, model, self.config.decoding,
                                             workers=self.config.inference.workers, show_progress=True)
            output_path = Path(output_path) if output_path else self.study_path("candidates", _mode_filename(mode))
            write_jsonl(candidates, output_path)
            self.logger.info(f"Generated {len(candidates)} {GenerationMode(mode).value} candidates to {output_path}")
            return True
        except Exception as e:
            self.logger.error(f"Error generating {mode} creatives: {e}")
            return False

    @skip_if_complete("query_free_generated", return_value=True)
    def run_query_free_generation(self) -> bool:
        mode = GenerationMode.QUERY_FREE
        if not (self.plan_creatives(mode) and self.generate_creatives(mode)):
            return False
        self.set_skip_trigger("query_free_generated", True)
        return True

    @skip_if_complete("query_aware_generated", return_value=True)
    def run_query_aware_generation(self) -> bool:
        mode = GenerationMode.QUERY_AWARE
        if not (self.plan_creatives(mode) and self.generate_creatives(mode)):
            return False
        self.set_skip_trigger("query_aware_generated", True)
        return True

    @skip_if_complete("creatives_filtered", return_value=True)
    def filter_creatives(self, candidate_paths: Optional[Sequence[PathLike]] = None,
                         ads_path: Optional[PathLike] = None, library_path: Optional[PathLike] = None) -> bool:
        """
        Apply the badcase rules and store passing candidates in the library.
        Rejected candidates go to candidates/rejected.jsonl with their reasons.
        """
        try:
            if candidate_paths is None:
                candidate_paths = [self.study_path("candidates", _mode_filename(mode)) for mode in GenerationMode]
                candidate_paths = [path for path in candidate_paths if path.exists()]
            if not candidate_paths:
                raise ValueError("no candidate files to filter")
            candidates = [c for path in candidate_paths for c in read_candidates(path)]
            ads = {ad.ad_id: ad for ad in self.load_ads(ads_path)}
            judged = apply_badcase_filter(candidates, ads, default_rules(self.config.badcase))
            rejected = [c for c in judged if not c.verdict.passed]
            write_jsonl(rejected, self.study_path("candidates", "rejected.jsonl"))

            library = CreativeLibrary(Path(library_path) if library_path else self.library_path)
            written = library.put(judged)
            self.logger.info(
                f"Badcase filter kept {len(judged) - len(rejected)} of {len(judged)} candidates; "
                f"{written} new library entries ({len(library)} total)"
            )
            self.set_skip_trigger("creatives_filtered", True)
            return True
        except Exception as e:
            self.logger.error(f"Error filtering creatives: {e}")
            return False

    def query_library(self, ad_id: str, mode: Union[GenerationMode, str],
                      library_path: Optional[PathLike] = None) -> List[CreativeCandidate]:
        library = CreativeLibrary(Path(library_path) if library_path else self.library_path)
        return library.query(ad_id, mode)


class EvaluationManager:
    """
    Mixin class providing offline GSB, hallucination and ablation reports.
    """

    @property
    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(max_retries=self.config.llm.max_retries, retry_delay=self.config.llm.retry_delay)

    def _write_gsb_summary(self, counts: GSBCounts, path: Path, label: str) -> dict:
        summary = {
            "n_good": counts.n_good, "n_same": counts.n_same, "n_bad": counts.n_bad,
            "advantage": advantage(counts) if counts.total else None,
        }
        if counts.total:
            good, same, bad = counts.percentages()
            summary["table"] = {"Good": format_percent(good), "Same": format_percent(same),
                                "Bad": format_percent(bad), "Advantage": format_percent(summary["advantage"])}
            self.logger.info(f"{label}: G/S/B {summary['table']}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return summary

    def evaluate_gsb_files(self, titles_a_path: PathLike, titles_b_path: PathLike, context_path: PathLike,
                           output_path: Optional[PathLike] = None) -> bool:
        """Judge title file A against title file B, aligned with the context records."""
        try:
            titles_a, titles_b = read_titles(titles_a_path), read_titles(titles_b_path)
            contexts = [JudgeContext.from_record(r) for r in self.load_eval_records(context_path)]
            counts, verdicts = asyncio.run(evaluate_gsb(
                titles_a, titles_b, contexts, self.judge_client,
                self.config.evaluation.judge_max_concurrency, self.retry_policy,
            ))
            output_path = Path(output_path) if output_path else self.study_path("reports", "gsb.jsonl")
            output_path.parent.mkdir(parents=True, exist_ok=True)
            with open(output_path, "w", encoding="utf-8") as f:
                for index, (a, b, verdict) in enumerate(zip(titles_a, titles_b, verdicts)):
                    f.write(json.dumps({"index": index, "title_a": a, "title_b": b, "verdict": verdict.value},
                                       ensure_ascii=False) + "\n")
            self._write_gsb_summary(counts, output_path.with_suffix(".summary.json"), "GSB")
            return True
        except Exception as e:
            self.logger.error(f"Error running GSB evaluation: {e}")
            return False

    def evaluate_hallucination_file(self, candidates_path: PathLike, ads_path: Optional[PathLike] = None,
                                    output_path: Optional[PathLike] = None) -> bool:
        """Hallucination pass rate of a candidates file, checked against each candidate's ad."""
        try:
            candidates = read_candidates(candidates_path)
            ads = {ad.ad_id: ad for ad in self.load_ads(ads_path)}
            report = asyncio.run(hallucination_pass_rate(
                [(c.title, ads[c.ad_id]) for c in candidates], self.judge_client,
                self.config.evaluation.judge_max_concurrency, self.retry_policy,
            ))
            output_path = Path(output_path) if output_path else self.study_path("reports", "hallucination.json")
            output_path.parent.mkdir(parents=True, exist_ok=True)
            output_path.write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
            self.logger.info(f"Hallucination pass rate {format_percent(report.pass_rate)} "
                             f"over {report.evaluated} titles ({report.errors} excluded)")
            return True
        except Exception as e:
            self.logger.error(f"Error computing hallucination pass rate: {e}")
            return False

    def run_ablation(self, grid_path: Optional[PathLike] = None, dataset_path: Optional[PathLike] = None,
                     eval_path: Optional[PathLike] = None, checkpoint_dir: Optional[PathLike] = None,
                     train_missing: bool = False, output_path: Optional[PathLike] = None) -> bool:
        """
        Ablation table over a grid file (default: the auxiliary-loss grid).

        Loss-toggle rows read ``<checkpoint_dir>/<row name>.ckpt``; cluster rows
        use the study's final checkpoint.
        """
        try:
            grid = load_grid(grid_path) if grid_path else aux_loss_grid()
            checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else self.study_path("checkpoints", "ablation")
            checkpoints = {}
            for spec in grid:
                path = checkpoint_dir / f"{spec.name}.ckpt"
                if spec.k is None and path.exists():
                    checkpoints[spec.name] = load_checkpoint(path)
            base = self.load_trained_checkpoint() if self.checkpoint_path.exists() else None

            rows = run_ablation_report(
                grid, self.load_records(dataset_path), self.load_eval_records(eval_path), self.judge_client,
                self.config, checkpoints=checkpoints, base_checkpoint=base, train_missing=train_missing,
            )
            table = render_table(rows)
            output_path = Path(output_path) if output_path else self.study_path("reports", "ablation.jsonl")
            write_report(rows, output_path, table, output_path.with_suffix(".txt"))
            self.logger.info(f"Ablation report ({len(rows)} rows) written to {output_path}\n{table}")
            return True
        except Exception as e:
            self.logger.error(f"Error running ablation report: {e}")
            return False

    @skip_if_complete("evaluation_completed", return_value=True)
    def evaluate_creatives(self, eval_path: Optional[PathLike] = None) -> bool:
        """
        Offline evaluation of the trained model on the evaluation split: each
        user gets its cluster center's title, judged against the ad's original
        title, plus the hallucination pass rate of those titles.
        """
        try:
            records = self.load_eval_records(eval_path)
            if not records:
                raise ValueError("evaluation split is empty")
            ckpt = self.load_trained_checkpoint()
            model = ckpt.build_model()
            clusters = ClusterModel.load(self.clusters_path)
            embeddings = extract_user_embeddings(users_from_records(records), model)
            centers = clusters.centers[clusters.assign(embeddings.vectors)]
            user_vectors = dict(zip(embeddings.user_ids, centers))

            titles = generate_for_records(model, records, user_vectors, ckpt.config)
            titles = [title if title.strip() else r.ad.original_title for title, r in zip(titles, records)]
            contexts = [JudgeContext.from_record(r) for r in records]
            concurrency = self.config.evaluation.judge_max_concurrency
            counts, _ = asyncio.run(evaluate_gsb(titles, [r.ad.original_title for r in records], contexts,
                                                 self.judge_client, concurrency, self.retry_policy))
            summary = self._write_gsb_summary(counts, self.study_path("reports", "evaluation_gsb.json"),
                                              "Generated vs original titles")
            pass_rate = asyncio.run(hallucination_pass_rate(list(zip(titles, (r.ad for r in records))),
                                                            self.judge_client, concurrency, self.retry_policy))
            summary["hallucination"] = pass_rate.model_dump()
            self.study_path("reports", "evaluation_summary.json").write_text(
                json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            self.logger.info(f"Hallucination pass rate {format_percent(pass_rate.pass_rate)}")
            self.set_skip_trigger("evaluation_completed", True)
            return True
        except Exception as e:
            self.logger.error(f"Error evaluating creatives: {e}")
            return False


class LLMWorkflowManagerMixin:
    """
    Mixin class for LLM client management.
    """

    def __init__(self):
        self._llm_client = None
        self._judge_client = None

    @property
    def llm_client(self):
        """Lazy-load the data-construction teacher on first access."""
        if self._llm_client is None:
            self._llm_client = build_llm_client(self.config.llm)
        return self._llm_client

    @property
    def judge_client(self):
        """Lazy-load the GSB / hallucination judge on first access."""
        if self._judge_client is None:
            self._judge_client = build_llm_client(self.config.llm)
        return self._judge_client
