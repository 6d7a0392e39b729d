"""Task orchestration: specs, runs, protocol sweeps, reporting."""

from .report import bars_svg, fewshot_svg, km_svg, report_emit, roc_svg
from .runner import (crossmodal_eval, extract_features, fewshot_sweep,
                     register_pair, run_survival_task, run_task)
from .synthetic import (make_classification_corpus, make_registration_pair,
                        make_survival_corpus)
from .tasks import (FewShotConfig, SplitGuard, TaskSpec, build_task_data,
                    load_task_rows, region_patches)

__all__ = [
    "FewShotConfig", "SplitGuard", "TaskSpec", "bars_svg", "build_task_data",
    "crossmodal_eval", "extract_features", "fewshot_svg", "fewshot_sweep",
    "km_svg", "load_task_rows", "make_classification_corpus",
    "make_registration_pair", "make_survival_corpus", "region_patches",
    "register_pair", "report_emit", "roc_svg", "run_survival_task", "run_task",
]
