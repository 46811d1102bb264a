"""experiments - evaluation protocols and the K / loss-mode sweep

run_suite trains one network per plan of a protocol (every CV fold or
every held-out subject) and aggregates the test accuracies. ablate
repeats a suite over a grid of ensemble sizes and loss modes.
"""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import os

from echub.errors import ParameterError, SuiteError
from echub.splits import all_plans
from echub.training import train

log = logging.getLogger(__name__)

RUN_COLUMNS = ("run_id", "test_accuracy", "val_accuracy", "best_epoch", "n_parameters")


def _run_summary(manifest):
    return {"run_id": manifest.run_id,
            "test_accuracy": manifest.test_accuracy,
            "val_accuracy": manifest.best_val_accuracy,
            "best_epoch": manifest.best_epoch,
            "n_parameters": manifest.n_parameters,
            "test_member_accuracies": manifest.test["member_accuracies"]}


def _run_plan(cfg, corpus, plan, output_dir):
    run_dir = os.path.join(output_dir, plan.name) if output_dir else None
    return _run_summary(train(cfg, corpus, plan, run_dir, run_id=plan.name))


def _mean(values):
    return sum(values) / len(values) if values else None


def build_report(report_id, mode, cfg, runs, failed=None):
    """Aggregate of finished runs; 'failed' names the plan that broke"""
    return {"report_id": report_id,
            "mode": mode,
            "config": cfg.to_dict(),
            "runs": runs,
            "test_accuracies": [r["test_accuracy"] for r in runs],
            "mean_test_accuracy": _mean([r["test_accuracy"] for r in runs]),
            "mean_val_accuracy": _mean([r["val_accuracy"] for r in runs]),
            "partial": failed is not None,
            "failed": failed}


def write_report(report, output_dir):
    if not os.path.isdir(output_dir):
        os.makedirs(output_dir)
    with open(os.path.join(output_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    with open(os.path.join(output_dir, "report.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RUN_COLUMNS)
        for run in report["runs"]:
            writer.writerow([run[c] for c in RUN_COLUMNS])
        writer.writerow(["mean", report["mean_test_accuracy"], report["mean_val_accuracy"],
                         "", ""])


def run_suite(mode, cfg, corpus, output_dir=None, report_id=None):
    """Every plan of 'mode' ("cv" or "loso"); returns the report dict

    With cfg.workers > 1 the runs go to a process pool; the report lists
    them in plan order either way. If a run fails, the finished runs are
    written as a partial report and SuiteError carries it.
    """
    plans = all_plans(mode, corpus.subject_ids, cfg.seed, cfg.n_folds)
    report_id = report_id or "%s-%s-K%d-seed%d" % (mode, cfg.loss_mode, cfg.n_models, cfg.seed)
    log.info("suite %s: %d runs with %d worker(s)", report_id, len(plans), cfg.workers)

    results, failed, error = {}, None, None
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_plan, cfg, corpus, plan, output_dir) for plan in plans]
            for plan, future in zip(plans, futures):
                try:
                    results[plan.name] = future.result()
                except Exception as e:
                    if failed is None:
                        failed, error = plan.name, e
    else:
        for plan in plans:
            try:
                results[plan.name] = _run_plan(cfg, corpus, plan, output_dir)
            except Exception as e:
                failed, error = plan.name, e
                break

    runs = [results[p.name] for p in plans if p.name in results]
    report = build_report(report_id, mode, cfg, runs, failed)
    if output_dir:
        write_report(report, output_dir)
    if failed is not None:
        log.error("suite %s: run %s failed: %s", report_id, failed, error)
        raise SuiteError("run %s failed: %s" % (failed, error), report=report)
    log.info("suite %s: mean test accuracy %.4f over %d runs", report_id,
             report["mean_test_accuracy"], len(runs))
    return report


@dataclasses.dataclass
class AblationTable:
    """Mean accuracies per (loss mode, K)"""
    loss_modes: list
    k_values: list
    test: dict
    val: dict

    def best_k(self, loss_mode):
        """K with the highest mean validation accuracy; smaller K on ties"""
        return max(self.k_values, key=lambda k: (self.val[(loss_mode, k)], -k))

    def rows(self):
        header = ["loss_mode"] + ["K=%d" % k for k in self.k_values] + \
            ["best_k_by_val", "test_at_best_k"]
        out = [header]
        for mode in self.loss_modes:
            best = self.best_k(mode)
            out.append([mode] + [self.test[(mode, k)] for k in self.k_values] +
                       [best, self.test[(mode, best)]])
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(self.rows())


def ablate(cfg, corpus, k_values, loss_modes, mode="cv", output_dir=None):
    """One suite per (loss mode, K): rows are loss modes, columns K

    K values above the smallest training-subject count of the protocol's
    plans cannot be partitioned and are skipped with a warning.
    """
    plans = all_plans(mode, corpus.subject_ids, cfg.seed, cfg.n_folds)
    max_k = min(len(plan.train) for plan in plans)
    skipped = sorted(k for k in k_values if k > max_k)
    if skipped:
        log.warning("ablation: skipping K=%s, the %s plans train on as few as %d subjects",
                    ",".join(str(k) for k in skipped), mode, max_k)
    k_values = sorted(k for k in k_values if k <= max_k)
    if not k_values:
        raise ParameterError("no ensemble size fits %d training subjects" % max_k)
    test, val = {}, {}
    for loss_mode in loss_modes:
        for k in k_values:
            name = "%s-K%d" % (loss_mode, k)
            suite_dir = os.path.join(output_dir, name) if output_dir else None
            report = run_suite(mode, cfg.replace(n_models=k, loss_mode=loss_mode), corpus,
                               suite_dir, report_id=name)
            test[(loss_mode, k)] = report["mean_test_accuracy"]
            val[(loss_mode, k)] = report["mean_val_accuracy"]
    table = AblationTable(list(loss_modes), k_values, test, val)
    if output_dir:
        table.write_csv(os.path.join(output_dir, "ablation.csv"))
    for loss_mode in loss_modes:
        log.info("ablation %s: best K by validation = %d", loss_mode, table.best_k(loss_mode))
    return table
