import os

import pandas as pd

from core.bench_eval import MP_OPT, TABLE_LABELS, BenchmarkTable
from core.neural_core import MLP, MLP_REG, PIMP
from utils.storage import read_json


class BenchmarkAnalyzer:
    def __init__(self, benchmark_paths, log_dir="logs"):
        self.benchmark_paths = list(benchmark_paths)
        self.log_dir = log_dir

    def load_tables(self):
        tables = []
        for path in self.benchmark_paths:
            if os.path.isdir(path):
                path = os.path.join(path, "benchmark.json")
            if not os.path.exists(path):
                raise FileNotFoundError(f"benchmark file not found: {path}")
            tables.append((path, BenchmarkTable.from_dict(read_json(path))))
        return tables

    def generate_summary_report(self, verbose=True):
        """Summarize benchmark tables plus whatever training logs exist"""
        tables = self.load_tables()
        summary = {
            'overview': self._get_overview(tables),
            'performance': self._get_performance(tables),
            'training': self._get_training_analysis(),
            'issues_recommendations': self._get_issues_and_recommendations(tables),
        }
        if verbose:
            self._print_summary(summary)
        return summary

    def _get_overview(self, tables):
        return [{
            'path': path,
            'grid': table.grid,
            'n_runs': table.n_runs,
            'seeds': table.seeds,
            'models': table.models,
            'failed_runs': len(table.failures),
        } for path, table in tables]

    def _get_performance(self, tables):
        performance = {}
        for path, table in tables:
            performance[path] = {
                model: {
                    'test_mae': table.summary(model, 'test_mae')['mean'],
                    'ood_mae': table.summary(model, 'ood_mae')['mean'],
                    'p5_test': table.summary(model, 'p5_test')['mean'],
                    'p5_ood': table.summary(model, 'p5_ood')['mean'],
                    'speedup': table.summary(model, 'speedup')['mean'],
                }
                for model in table.models
            }
        return performance

    def _get_training_analysis(self):
        """Best validation loss and epochs per model from training.csv"""
        training = {}
        try:
            history = pd.read_csv(f'{self.log_dir}/training.csv')
        except (FileNotFoundError, pd.errors.EmptyDataError):
            return {'error': 'No training log found'}
        if history.empty:
            return {'error': 'No training data'}
        for model, rows in history.groupby('model'):
            training[model] = {
                'runs': int(rows['run_id'].nunique()),
                'best_val_loss': float(rows['val_loss'].min()),
                'avg_epochs': float(rows.groupby('run_id')['epoch'].max().mean()),
            }
        return training

    def _get_issues_and_recommendations(self, tables):
        """Check the expected qualitative orderings between models"""
        issues = []
        recommendations = []
        for path, table in tables:
            mean = lambda model, metric: table.summary(model, metric)['mean']
            for failure in table.failures:
                issues.append(f"❌ {table.grid}: {failure['model']} seed {failure['seed']} failed ({failure['error']})")
            p5_mp = mean(MP_OPT, 'p5_test')
            if p5_mp is not None and p5_mp > 0:
                issues.append(f"⚠️ {table.grid}: MP Opt P5 is {100 * p5_mp:.2f}% on test")
                recommendations.append("✅ Raise the MP Opt layer budget (mp.n_layers) or lower mp.tol")
            p5_pimp, p5_mlp = mean(PIMP, 'p5_test'), mean(MLP, 'p5_test')
            if p5_pimp is not None and p5_mlp is not None and p5_pimp >= p5_mlp:
                issues.append(f"⚠️ {table.grid}: PIMP P5 ({100 * p5_pimp:.1f}%) not below MLP ({100 * p5_mlp:.1f}%)")
                recommendations.append("✅ Increase pimp_layers or train longer")
            for model in (MLP, MLP_REG, PIMP):
                test, ood = mean(model, 'test_mae'), mean(model, 'ood_mae')
                if test is not None and ood is not None and ood <= test:
                    issues.append(f"ℹ️ {table.grid}: {TABLE_LABELS[model]} OOD MAE not above test MAE")
        return {
            'issues': issues,
            'recommendations': sorted(set(recommendations)),
        }

    def write_markdown(self, path):
        tables = self.load_tables()
        with open(path, 'w', encoding='utf-8') as f:
            f.write("\n".join(table.to_markdown() for _, table in tables))
        return path

    def _print_summary(self, summary):
        print("\n📈 BENCHMARK SUMMARY")
        print("=" * 50)

        print(f"\n📊 OVERVIEW:")
        for entry in summary['overview']:
            print(f"   {entry['grid']} ({entry['path']}): {entry['n_runs']} runs, seeds {entry['seeds']}, "
                  f"{entry['failed_runs']} failed")

        print(f"\n🎯 MODELS:")
        for path, models in summary['performance'].items():
            print(f"   {path}")
            for model, data in models.items():
                fmt = lambda v, spec: format(v, spec) if v is not None else "n/a"
                p5 = f"{100 * data['p5_test']:.1f}%" if data['p5_test'] is not None else "n/a"
                print(f"   - {TABLE_LABELS.get(model, model)}: MAE test {fmt(data['test_mae'], '.2e')}, "
                      f"OOD {fmt(data['ood_mae'], '.2e')}, P5 test {p5}, "
                      f"speed-up {fmt(data['speedup'], '.2f')}")

        training = summary['training']
        print(f"\n🧠 TRAINING:")
        if 'error' not in training:
            for model, data in training.items():
                print(f"   {model}: {data['runs']} runs, best val loss {data['best_val_loss']:.3e}, "
                      f"avg epochs {data['avg_epochs']:.0f}")
        else:
            print(f"   {training['error']}")

        issues_rec = summary['issues_recommendations']
        print(f"\n🔧 ISSUES & RECOMMENDATIONS:")
        if not issues_rec['issues']:
            print("   ✅ Orderings as expected")
        for issue in issues_rec['issues']:
            print(f"   {issue}")
        for rec in issues_rec['recommendations']:
            print(f"   {rec}")

        print("\n" + "=" * 50)
