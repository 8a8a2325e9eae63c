"""Regenerate the golden fixture: python3 tests/data/make_golden.py

Writes events.tsv, config.txt, checkpoint.bin and metrics.tsv under
tests/data/golden. Only rerun after an intended change to model numerics.
"""

import shutil
import sys
import tempfile
from pathlib import Path

from dynllm import cli
from dynllm.config import load_config
from dynllm.ctdg_store import write_event_file
from dynllm.synthetic import planted_clusters

HERE = Path(__file__).parent / "golden"
SETTINGS = ["node_dim=8", "item_dynamic_dim=4", "time_freqs=2", "mlp_hidden=8", "facet_dim=8", "r=4",
            "provider_dim=8", "heads=2", "n_user=3", "n_item=3", "refresh_every=5", "batch=32",
            "memory_chunk=16", "max_epochs=3", "patience=3", "time_scale=1.0", "seed=0", "provider=mock"]


def main():
    HERE.mkdir(exist_ok=True)
    write_event_file(planted_clusters(users=8, items=12, clusters=2, events=240, span=240.0, seed=11),
                     HERE / "events.tsv")
    work = Path(tempfile.mkdtemp())
    sets = sum((["--set", s] for s in SETTINGS), [])
    assert cli.main(["prepare", str(HERE / "events.tsv"), str(work / "store")]) == 0
    common = ["--store", str(work / "store"), "--cache-dir", str(work / "cache"), *sets]
    assert cli.main(["augment", *common]) == 0
    assert cli.main(["train", *common, "--runs", str(work / "runs")]) == 0
    run_dir = next((work / "runs").iterdir())
    for name in ("checkpoint.bin", "metrics.tsv"):
        shutil.copy(run_dir / name, HERE / name)
    # machine-specific paths are filled in by the test
    cfg = load_config(run_dir / "config.txt").replace(dataset="", cache_dir="cache")
    (HERE / "config.txt").write_text(cfg.to_text())
    shutil.rmtree(work)


if __name__ == "__main__":
    sys.exit(main())
