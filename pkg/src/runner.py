"""Runs the single-model baseline and the two pipeline regimes over a dataset.

Items run concurrently up to ``parallelism``; the stages of one item always run
in order.  Traces are written in dataset order so that a deterministic backend
produces the same trace file whatever the parallelism.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import structlog
from tqdm import tqdm

from src.backends import AgentRequest, Backend, prompt_sha256
from src.blame import assign_baseline_blame, assign_blame
from src.core import (
    DEFAULT_PRICE_SHEET,
    PIPELINE_ROLES,
    Dataset,
    MaybeAnswer,
    ModelId,
    PipelineConfig,
    PriceSheet,
    Regime,
    StageRecord,
    StageRole,
    TaskItem,
    TokenUsage,
    TraceRecord,
    parse_answer_letter,
)
from src.errors import BackendError, ConfigError, ResumeError, RunError
from src.handoff import (
    DEFAULT_TEMPLATES,
    PromptTemplates,
    StageArtifact,
    build_accountable_handoff,
    build_simple_handoff,
    validate_artifact,
    with_format_reminder,
)
from src.metrics import stage_cost
from src.storage import (
    MANIFEST_NAME,
    RunManifest,
    TraceWriter,
    load_traces,
    read_manifest,
    write_manifest,
)

logger = structlog.get_logger(__name__)

DEFAULT_PARALLELISM = os.cpu_count() or 1


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class RunResult:
    run_dir: Path
    manifest: RunManifest
    traces: list[TraceRecord]
    new_traces: int

    @property
    def partial(self) -> bool:
        """True when some stage failed and was recorded as UNDEFINED."""
        return self.manifest.failed_items > 0


class PipelineRunner:
    def __init__(
        self,
        backends: Mapping[str, Backend],
        prices: PriceSheet = DEFAULT_PRICE_SHEET,
        templates: PromptTemplates = DEFAULT_TEMPLATES,
        parallelism: Optional[int] = None,
        timeout: float = 60.0,
        reask_malformed: bool = True,
        clock: Callable[[], datetime] = utc_now,
        progress: bool = True,
        templates_dir: Optional[str] = None,
        seed: Optional[int] = None,
    ):
        self.backends = dict(backends)
        self.prices = prices
        self.templates = templates
        self.parallelism = max(1, parallelism or DEFAULT_PARALLELISM)
        self.timeout = timeout
        self.reask_malformed = reask_malformed
        self.clock = clock
        self.progress = progress
        self.templates_dir = templates_dir
        self.seed = seed

    # --- single stage ----------------------------------------------------

    def _backend(self, model: ModelId) -> Backend:
        try:
            return self.backends[model.key]
        except KeyError:
            raise ConfigError(f"no backend configured for model {model.key!r}") from None

    def _check_models(self, models: Sequence[ModelId], prices: PriceSheet) -> None:
        for model in models:
            self._backend(model)
            prices.row(model.key)

    def _call_stage(
        self,
        item: TaskItem,
        role: StageRole,
        model: ModelId,
        prompt: str,
        upstream_answer: MaybeAnswer,
        prices: PriceSheet,
        reask: bool,
    ) -> StageRecord:
        """Invoke one stage, re-asking once with a format reminder if allowed."""
        backend = self._backend(model)
        raw, answer, error = "", None, None
        usage: Optional[TokenUsage] = TokenUsage()
        latency = 0.0
        attempts = 0
        current = prompt

        for _ in range(2 if reask else 1):
            attempts += 1
            request = AgentRequest(
                prompt=current,
                role=role,
                model=model,
                timeout=self.timeout,
                task=item,
                upstream_answer=upstream_answer,
            )
            try:
                response = backend.invoke(request)
            except BackendError as exc:
                error = str(exc)
                logger.warning("stage failed", task_id=item.id, role=role.value, model=model.key, error=error)
                break
            raw = response.raw_text
            latency += response.latency
            usage = usage + response.usage if usage is not None and response.usage is not None else None
            answer = parse_answer_letter(raw)
            if answer is not None:
                break
            current = with_format_reminder(prompt)

        if attempts == 1 and error is not None:
            usage = None
        cost = stage_cost(usage, prices.row(model.key)) if usage is not None else None
        return StageRecord(
            role=role,
            model=model.key,
            prompt_sha256=prompt_sha256(prompt),
            raw_output=raw,
            answer=answer,
            usage=usage,
            latency=latency,
            cost=cost,
            attempts=attempts,
            error=error,
        )

    # --- one item --------------------------------------------------------

    def _baseline_item(self, item: TaskItem, model: ModelId, dataset: str, prices: PriceSheet) -> TraceRecord:
        started = self.clock()
        prompt = build_simple_handoff(item, None, self.templates)
        record = self._call_stage(item, StageRole.PLANNER, model, prompt, None, prices, reask=False)
        blame = assign_baseline_blame(record.answer, item.gold)
        return TraceRecord(
            task_id=item.id,
            dataset=dataset,
            label=model.key,
            regime=Regime.BASELINE,
            gold=item.gold,
            stages={StageRole.PLANNER: record},
            final=blame.final,
            flags=blame.flags,
            origin=blame.origin,
            started_at=started,
            finished_at=self.clock(),
        )

    def _pipeline_item(self, item: TaskItem, config: PipelineConfig, dataset: str, prices: PriceSheet) -> TraceRecord:
        started = self.clock()
        accountable = config.regime == Regime.ACCOUNTABLE
        artifacts: list[StageArtifact] = []
        records: dict[StageRole, StageRecord] = {}

        for role in PIPELINE_ROLES:
            model = config.model_for(role)
            if accountable:
                prompt = build_accountable_handoff(item, role, artifacts, self.templates)
            else:
                prompt = build_simple_handoff(item, artifacts[-1] if artifacts else None, self.templates)
            upstream = artifacts[-1].answer if artifacts else None
            record = self._call_stage(
                item, role, model, prompt, upstream, prices,
                reask=accountable and self.reask_malformed,
            )
            records[role] = record
            artifacts.append(validate_artifact(record.raw_output, item.id, role, model, artifacts))

        blame = assign_blame(*(records[r].answer for r in PIPELINE_ROLES), item.gold)
        return TraceRecord(
            task_id=item.id,
            dataset=dataset,
            label=config.label,
            regime=config.regime,
            gold=item.gold,
            stages=records,
            final=blame.final,
            flags=blame.flags,
            origin=blame.origin,
            started_at=started,
            finished_at=self.clock(),
        )

    # --- runs ------------------------------------------------------------

    def _new_manifest(
        self,
        regime: Regime,
        label: str,
        models: Sequence[ModelId],
        dataset: Dataset,
        dataset_path: Optional[str],
    ) -> RunManifest:
        now = self.clock()
        return RunManifest(
            regime=regime,
            label=label,
            models=list(models),
            dataset_name=dataset.name,
            dataset_path=dataset_path,
            dataset_hash=dataset.content_hash(),
            prices=self.prices,
            price_sheet_hash=self.prices.content_hash(),
            parallelism=self.parallelism,
            seed=self.seed,
            templates_dir=self.templates_dir,
            item_count=len(dataset),
            created_at=now,
            updated_at=now,
        )

    def _execute(
        self,
        run_dir: Path,
        manifest: RunManifest,
        dataset: Dataset,
        existing: list[TraceRecord],
        item_fn: Callable[[TaskItem], TraceRecord],
    ) -> RunResult:
        done = {t.task_id for t in existing}
        pending = [item for item in dataset if item.id not in done]
        write_manifest(run_dir, manifest)
        logger.info(
            "run started",
            label=manifest.label,
            regime=manifest.regime.value,
            pending=len(pending),
            already_traced=len(done),
            parallelism=self.parallelism,
        )

        new: list[TraceRecord] = []
        with TraceWriter(run_dir / manifest.trace_file) as writer:
            pool = ThreadPoolExecutor(max_workers=self.parallelism)
            try:
                results = pool.map(item_fn, pending)
                for trace in tqdm(results, total=len(pending), desc=manifest.label, disable=not self.progress):
                    writer.append(trace)
                    new.append(trace)
            except BaseException:
                pool.shutdown(wait=False, cancel_futures=True)
                raise
            pool.shutdown()

        traces = existing + new
        failed_stages = sum(1 for t in traces for s in t.stages.values() if s.error)
        failed_items = sum(1 for t in traces if t.has_errors)
        manifest = manifest.model_copy(
            update={
                "traced_count": len(traces),
                "failed_stages": failed_stages,
                "failed_items": failed_items,
                "complete": len(traces) == len(dataset),
                "updated_at": self.clock(),
            }
        )
        write_manifest(run_dir, manifest)
        logger.info(
            "run finished",
            label=manifest.label,
            regime=manifest.regime.value,
            traced=len(traces),
            new=len(new),
            failed_items=failed_items,
        )
        return RunResult(run_dir=run_dir, manifest=manifest, traces=traces, new_traces=len(new))

    def _fresh_dir(self, out_dir: Union[str, Path]) -> Path:
        run_dir = Path(out_dir)
        if (run_dir / MANIFEST_NAME).exists():
            raise ResumeError(f"{run_dir} already holds a run; resume it or choose another directory")
        return run_dir

    @staticmethod
    def _check_dataset(dataset: Dataset) -> None:
        if len(dataset.items) == 0:
            raise RunError("dataset is empty; nothing to run")

    def run_baseline(
        self,
        model: ModelId,
        dataset: Dataset,
        out_dir: Union[str, Path],
        dataset_path: Optional[str] = None,
    ) -> RunResult:
        """One plain-prompt invocation per item; only the Planner slot is filled."""
        self._check_dataset(dataset)
        self._check_models([model], self.prices)
        run_dir = self._fresh_dir(out_dir)
        manifest = self._new_manifest(Regime.BASELINE, model.key, [model], dataset, dataset_path)
        prices = self.prices
        return self._execute(
            run_dir, manifest, dataset, [],
            lambda item: self._baseline_item(item, model, dataset.name, prices),
        )

    def run_pipeline(
        self,
        config: PipelineConfig,
        dataset: Dataset,
        out_dir: Union[str, Path],
        dataset_path: Optional[str] = None,
    ) -> RunResult:
        self._check_dataset(dataset)
        self._check_models(config.models, self.prices)
        run_dir = self._fresh_dir(out_dir)
        manifest = self._new_manifest(config.regime, config.label, config.models, dataset, dataset_path)
        prices = self.prices
        return self._execute(
            run_dir, manifest, dataset, [],
            lambda item: self._pipeline_item(item, config, dataset.name, prices),
        )

    def resume(self, run_dir: Union[str, Path], dataset: Dataset) -> RunResult:
        """Trace only the items the run has not traced yet."""
        run_dir = Path(run_dir)
        manifest = read_manifest(run_dir)
        if manifest.dataset_hash != dataset.content_hash():
            raise ResumeError(
                f"{run_dir}: dataset content hash does not match the run's "
                f"({manifest.dataset_hash[:12]}); refusing to resume"
            )
        existing = load_traces(run_dir / manifest.trace_file)
        seen = set()
        for trace in existing:
            if trace.task_id not in dataset.ids:
                raise ResumeError(f"{run_dir}: trace for unknown task {trace.task_id!r}")
            if trace.task_id in seen:
                raise ResumeError(f"{run_dir}: task {trace.task_id!r} traced twice")
            seen.add(trace.task_id)

        if self.seed != manifest.seed:
            raise ResumeError(
                f"{run_dir}: run was started with seed {manifest.seed}, not {self.seed}; refusing to resume"
            )
        prices = manifest.prices
        self._check_models(manifest.models, prices)
        if manifest.regime == Regime.BASELINE:
            model = manifest.models[0]
            item_fn = lambda item: self._baseline_item(item, model, manifest.dataset_name, prices)  # noqa: E731
        else:
            planner, executor, critic = manifest.models
            config = PipelineConfig(planner=planner, executor=executor, critic=critic, regime=manifest.regime)
            if config.label != manifest.label:
                raise ResumeError(f"{run_dir}: manifest label {manifest.label!r} does not match its models")
            item_fn = lambda item: self._pipeline_item(item, config, manifest.dataset_name, prices)  # noqa: E731
        return self._execute(run_dir, manifest, dataset, existing, item_fn)
