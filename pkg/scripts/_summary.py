"""Shared CSV writer for the ensemble scripts."""
import csv
from pathlib import Path

from lrvi.harness import _fmt, aggregate, write_sweep_csv


def write_ensemble(results: dict, out_dir, prefix: str, keep_runs: bool = False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for regime, runs in results.items():
        s = aggregate(runs)
        path = out / f"{prefix}_{regime}_summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = ["T", "frac_converged"]
            for m in s.quartiles:
                cols += [f"{m}_q1", f"{m}_q2", f"{m}_q3"]
            w.writerow(cols)
            for t in range(s.T.size):
                row = [s.T[t], s.frac_converged[t]]
                for m in s.quartiles:
                    row += list(s.quartiles[m][t])
                w.writerow([_fmt(float(v)) for v in row])
        if keep_runs:
            for k, recs in enumerate(runs):
                write_sweep_csv(recs, out / f"{prefix}_{regime}_run{k:02d}.csv")
        print(f"wrote {path}")
