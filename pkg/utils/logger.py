import csv
import json
import os
import time
from datetime import datetime

import pandas as pd

TRAINING_COLUMNS = [
    'timestamp', 'run_id', 'model', 'epoch', 'train_loss', 'val_loss',
    'data_loss', 'physics_loss', 'lr'
]
EVALUATION_COLUMNS = [
    'timestamp', 'run_id', 'model', 'split', 'mae', 'mape90', 'p5_violation', 'p5_mape', 'speedup'
]


class AdvancedLogger:
    def __init__(self, log_dir="logs"):
        self.log_dir = log_dir
        self.training_log_file = f"{log_dir}/training.csv"
        self.evaluation_log_file = f"{log_dir}/evaluations.csv"
        self.performance_log_file = f"{log_dir}/performance.json"
        self.setup_logging()

    def setup_logging(self):
        """Create log directory and files with headers"""
        os.makedirs(self.log_dir, exist_ok=True)

        for path, columns in ((self.training_log_file, TRAINING_COLUMNS),
                              (self.evaluation_log_file, EVALUATION_COLUMNS)):
            if not os.path.exists(path):
                with open(path, 'w', newline='', encoding='utf-8') as f:
                    csv.writer(f).writerow(columns)

        if not os.path.exists(self.performance_log_file):
            with open(self.performance_log_file, 'w', encoding='utf-8') as f:
                json.dump({
                    "session_start": datetime.now().isoformat(),
                    "total_runs": 0,
                    "failed_runs": 0,
                    "models": {}
                }, f, indent=2)

    def _append(self, path, row):
        with open(path, 'a', newline='', encoding='utf-8') as f:
            csv.writer(f).writerow(row)

    def log_epoch(self, run_id, model, epoch, train_loss, val_loss, data_loss, physics_loss, lr):
        """Append one epoch of a training run"""
        try:
            self._append(self.training_log_file, [
                time.time(), run_id, model, epoch, train_loss, val_loss, data_loss, physics_loss, lr
            ])
        except OSError as e:
            print(f"❌ Error logging epoch: {e}")

    def log_run(self, run_id, model, report):
        """Record a finished training run in the performance summary"""
        try:
            performance = self._read_performance()
            performance["total_runs"] += 1
            entry = performance["models"].setdefault(model, {
                "runs": 0, "best_val_loss": None, "total_wall_time": 0.0, "run_ids": []
            })
            entry["runs"] += 1
            entry["run_ids"].append(run_id)
            entry["total_wall_time"] += report.wall_time
            best = min(report.val_loss) if report.val_loss else None
            if best is not None and (entry["best_val_loss"] is None or best < entry["best_val_loss"]):
                entry["best_val_loss"] = best
            self._write_performance(performance)
            print(f"📝 Run logged: {run_id} ({report.epochs_run} epochs, {report.wall_time:.1f}s)")
        except (OSError, ValueError) as e:
            print(f"❌ Error logging run: {e}")

    def log_failure(self, run_id, model, error):
        try:
            performance = self._read_performance()
            performance["failed_runs"] += 1
            performance.setdefault("failures", []).append(
                {"run_id": run_id, "model": model, "error": str(error)})
            self._write_performance(performance)
            print(f"⚠️ Run failed: {run_id} ({error})")
        except (OSError, ValueError) as e:
            print(f"❌ Error logging failure: {e}")

    def log_evaluation(self, run_id, model, split, metrics, physics=None, speedup=None):
        """Append one evaluation row"""
        try:
            self._append(self.evaluation_log_file, [
                time.time(), run_id, model, split, metrics.mae, metrics.mape90,
                physics.p5 if physics else '', physics.p5_mape if physics else '',
                speedup if speedup is not None else ''
            ])
        except OSError as e:
            print(f"❌ Error logging evaluation: {e}")

    def _read_performance(self):
        with open(self.performance_log_file, 'r', encoding='utf-8') as f:
            return json.load(f)

    def _write_performance(self, performance):
        with open(self.performance_log_file, 'w', encoding='utf-8') as f:
            json.dump(performance, f, indent=2)

    def get_training_history(self, model=None, run_id=None):
        """Training rows as a DataFrame, optionally filtered"""
        try:
            history = pd.read_csv(self.training_log_file)
        except (FileNotFoundError, pd.errors.EmptyDataError):
            return pd.DataFrame(columns=TRAINING_COLUMNS)
        if model:
            history = history[history['model'] == model]
        if run_id:
            history = history[history['run_id'] == run_id]
        return history

    def get_performance_report(self):
        """Per-model summary of logged runs"""
        try:
            performance = self._read_performance()
        except (OSError, ValueError) as e:
            print(f"❌ Error generating performance report: {e}")
            return {}
        models = performance.get("models", {})
        return {
            "total_runs": performance.get("total_runs", 0),
            "failed_runs": performance.get("failed_runs", 0),
            "models": {
                name: {
                    "runs": entry["runs"],
                    "best_val_loss": entry["best_val_loss"],
                    "avg_wall_time": entry["total_wall_time"] / entry["runs"] if entry["runs"] else 0.0,
                }
                for name, entry in models.items()
            },
        }
