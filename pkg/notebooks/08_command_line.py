"""
Command line: prepare, augment, train, evaluate
===============================================

The same workflow as the training notebook, driven through ``dynllm``
subcommands. Each train run gets a directory holding its configuration,
log, checkpoint and metrics.
"""

import subprocess
import sys
import tempfile
from pathlib import Path

from dynllm.ctdg_store import write_event_file
from dynllm.synthetic import planted_clusters

root = Path(tempfile.mkdtemp())
write_event_file(planted_clusters(users=10, items=20, clusters=2, events=400, span=400.0, seed=4),
                 root / "events.tsv")
small = ["node_dim=8", "item_dynamic_dim=4", "time_freqs=2", "mlp_hidden=8", "facet_dim=8", "r=4",
         "provider_dim=8", "batch=64", "max_epochs=2", "time_scale=1.0"]
settings = sum((["--set", s] for s in small), [])


def dynllm(*args):
    out = subprocess.run([sys.executable, "-m", "dynllm", *map(str, args)], capture_output=True, text=True)
    print("$ dynllm", " ".join(map(str, args[:2])), "...")
    print(out.stdout.strip() or out.stderr.strip())
    return out.returncode


dynllm("prepare", root / "events.tsv", root / "store")
print((root / "store" / "manifest.json").read_text())

dynllm("augment", "--store", root / "store", "--cache-dir", root / "cache", "--provider", "mock", *settings)
dynllm("train", "--store", root / "store", "--cache-dir", root / "cache", "--runs", root / "runs", *settings)

run_dir = next((root / "runs").iterdir())
print(sorted(p.name for p in run_dir.iterdir()))
dynllm("evaluate", run_dir)
print("re-evaluation identical:", (run_dir / "metrics_eval.tsv").read_text() == (run_dir / "metrics.tsv").read_text())

# configuration mistakes exit with code 2 and a one-line structured message
print("exit code", dynllm("train", "--store", root / "store", "--set", "r=999"))
