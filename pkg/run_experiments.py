#!/usr/bin/env python3
"""
run_experiments.py — Batch runner for lutnet train-toy method sweeps.

Usage examples
──────────────
    # Five seeds of one method on two-moons
    python run_experiments.py --seeds 1-5 --method octave

    # Extra train-toy flags
    python run_experiments.py --seeds 1-3 --method kmeans --extra-args "--n-w 8 --S 50"

    # From an experiment plan file
    python run_experiments.py --plan experiments.json

    # Verify outputs exist after a batch
    python run_experiments.py --verify --plan experiments.json
"""

import argparse
import json
import os
import subprocess
import sys
import time


# ── Helpers ────────────────────────────────────────────────────────────────

def parse_seed_range(spec: str) -> list:
    """Parse a seed specification like '1-20' or '1,3,5' or '42' into a list."""
    seeds = []
    for part in str(spec).split(','):
        part = part.strip()
        if not part:
            continue
        if '-' in part:
            lo, hi = part.split('-', 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def condition_name(task: str, network: str, method: str) -> str:
    """Same label lutnet.train_ste.TrainConfig.condition produces."""
    return f'{task.split(":")[0]}_{network}_{method}'


def run_single(seed: int, task: str, network: str, method: str, extra_args: list,
               output_dir: str = 'runs', timeout: int = 1800) -> dict:
    """Run one train-toy invocation as a subprocess.  Returns a result dict."""
    cmd = [
        sys.executable, '-m', 'lutnet', '--quiet', '--output-dir', output_dir,
        'train-toy', '--task', task, '--network', network, '--method', method,
        '--seed', str(seed),
    ] + extra_args
    condition = condition_name(task, network, method)

    print(f'  [{condition}] seed={seed}  ...', end='', flush=True)
    t0 = time.time()
    result = subprocess.run(cmd, capture_output=True, text=True, encoding='utf-8',
                            errors='replace', timeout=timeout)
    elapsed = round(time.time() - t0, 1)
    ok = result.returncode == 0
    print(f'  {"OK" if ok else f"FAIL(rc={result.returncode})"}  ({elapsed}s)')

    if not ok:
        for line in result.stderr.strip().splitlines()[-10:]:
            print(f'    | {line}')

    return {'seed': seed, 'condition': condition, 'ok': ok, 'elapsed': elapsed,
            'returncode': result.returncode}


def run_batch(seeds: list, task: str, network: str, method: str, extra_args: list,
              output_dir: str = 'runs') -> list:
    """Run a batch of seeds for one condition, sequentially."""
    results = []
    for seed in seeds:
        try:
            results.append(run_single(seed, task, network, method, extra_args, output_dir))
        except subprocess.TimeoutExpired:
            print(f'  [{method}] seed={seed}  TIMEOUT')
            results.append({'seed': seed, 'condition': condition_name(task, network, method),
                            'ok': False, 'elapsed': 0, 'returncode': -1})
    return results


def _plan_conditions(plan: dict):
    for cond in plan.get('conditions', []):
        extra = cond.get('extra_args', [])
        if isinstance(extra, str):
            extra = extra.split()
        yield (cond.get('task', plan.get('default_task', 'moons')),
               cond.get('network', plan.get('default_network', 'mlp')),
               cond['method'], parse_seed_range(cond.get('seeds', '1-3')), extra)


def run_from_plan(plan_path: str, output_dir: str = 'runs') -> list:
    """Load an experiment plan JSON and execute every condition × seed."""
    with open(plan_path, 'r', encoding='utf-8') as f:
        plan = json.load(f)

    conditions = list(_plan_conditions(plan))
    print(f'\n{"=" * 60}')
    print(f'  Experiment plan: {plan_path}')
    print(f'  Conditions: {len(conditions)}')
    print(f'{"=" * 60}\n')

    all_results = []
    for task, network, method, seeds, extra in conditions:
        print(f'\n── Condition: {condition_name(task, network, method)}  ({len(seeds)} seeds) ──')
        results = run_batch(seeds, task, network, method, extra, output_dir)
        all_results.extend(results)
        ok_n = sum(1 for r in results if r['ok'])
        print(f'   Done: {ok_n} OK, {len(results) - ok_n} FAIL  '
              f'({sum(r["elapsed"] for r in results):.0f}s total)')

    ok_total = sum(1 for r in all_results if r['ok'])
    print(f'\n{"=" * 60}')
    print(f'  Overall: {ok_total}/{len(all_results)} OK, {len(all_results) - ok_total} FAIL')
    print(f'{"=" * 60}\n')
    return all_results


def verify_outputs(plan_path: str, output_dir: str = 'runs') -> bool:
    """Check that expected CSV files exist for every condition × seed."""
    with open(plan_path, 'r', encoding='utf-8') as f:
        plan = json.load(f)

    missing = []
    for task, network, method, seeds, _ in _plan_conditions(plan):
        name = condition_name(task, network, method)
        for seed in seeds:
            csv_path = os.path.join(output_dir, f'metrics_{name}_seed_{seed}.csv')
            if not os.path.isfile(csv_path):
                missing.append((name, seed, csv_path))

    summary_path = os.path.join(output_dir, 'run_summaries.csv')
    if not os.path.isfile(summary_path):
        missing.append(('*', '*', summary_path))

    if missing:
        print(f'\n  ✗ {len(missing)} missing output(s):')
        for cond, seed, path in missing[:20]:
            print(f'    [{cond}] seed={seed}: {path}')
        if len(missing) > 20:
            print(f'    ... and {len(missing) - 20} more')
        return False
    print('  ✓ All expected outputs found.')
    return True


# ── Main ───────────────────────────────────────────────────────────────────

def main():
    parser = argparse.ArgumentParser(description='Batch runner for lutnet train-toy sweeps')
    parser.add_argument('--seeds', type=str, default=None,
                        help='Seed range, e.g. "1-10" or "1,5,10"')
    parser.add_argument('--task', type=str, default='moons')
    parser.add_argument('--network', type=str, default='mlp')
    parser.add_argument('--method', type=str, default='octave')
    parser.add_argument('--extra-args', type=str, default='',
                        help='Extra train-toy arguments (quoted string)')
    parser.add_argument('--output-dir', type=str, default='runs')
    parser.add_argument('--plan', type=str, default=None,
                        help='Path to experiment plan JSON')
    parser.add_argument('--verify', action='store_true',
                        help='Verify output files exist (use with --plan)')
    args = parser.parse_args()

    if args.verify and args.plan:
        sys.exit(0 if verify_outputs(args.plan, args.output_dir) else 1)

    if args.plan:
        results = run_from_plan(args.plan, args.output_dir)
    elif args.seeds:
        seeds = parse_seed_range(args.seeds)
        extra = args.extra_args.split() if args.extra_args else []
        print(f'\n-- Batch: {condition_name(args.task, args.network, args.method)}  '
              f'({len(seeds)} seeds) --')
        results = run_batch(seeds, args.task, args.network, args.method, extra, args.output_dir)
        print(f'\n  Done: {sum(1 for r in results if r["ok"])}/{len(results)} OK')
    else:
        parser.print_help()
        sys.exit(1)
    sys.exit(0 if all(r['ok'] for r in results) else 1)


if __name__ == '__main__':
    main()
