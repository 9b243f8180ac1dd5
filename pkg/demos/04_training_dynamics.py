"""Three training recipes on the synthetic benchmark, driven through the command line.

* fixed       sparse from scratch, temperature held at 0.8
* heat        sparse from scratch, temperature heated from 0.8 with k=1
* dense_heat  5 dense epochs, then sparsify, heated like "heat"

Each run takes about a minute. Pass a seed as the first argument to try another draw.

Run: python3 demos/04_training_dynamics.py [seed]
"""
import json
import sys
import tempfile
from pathlib import Path

from moeheat.cli import main
from moeheat.trainer import read_metrics

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
base = json.loads((Path(__file__).parent / "reference_config.json").read_text())
base["data"]["seed"] = base["train"]["seed"] = seed

arms = {"fixed": (0.0, 0), "heat": (1.0, 0), "dense_heat": (1.0, 5)}

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "base.json").write_text(json.dumps(base))
    main(["gen-data", "--config", str(tmp / "base.json"), "--out", str(tmp / "corpus.jsonl")])
    print()

    for name, (k, dense_epochs) in arms.items():
        cfg = json.loads(json.dumps(base))
        cfg["schedule"]["k"] = k
        cfg["train"]["dense_epochs"] = dense_epochs
        (tmp / f"{name}.json").write_text(json.dumps(cfg))
        print(f"training {name} ...", flush=True)
        main(["train", "--config", str(tmp / f"{name}.json"), "--data", str(tmp / "corpus.jsonl"),
              "--out", str(tmp / name)])

    # The convergence target is whatever the fixed-temperature baseline ends at.
    target = read_metrics(tmp / "fixed" / "metrics.csv")[-1].valid_ppl
    print("\nvalidation ppl by epoch")
    for name in arms:
        curve = [m.valid_ppl for m in read_metrics(tmp / name / "metrics.csv")]
        print(f"  {name:<10}", " ".join(f"{x:6.2f}" for x in curve[::2]))
    print()
    # Run 0 is fixed, 1 heat, 2 dense_heat. H_first/H_last are usage entropies at the first and
    # last epoch a task was seen; drift is the total variation between those two histograms.
    main(["report", "--target-ppl", f"{target:.6f}", "--run", *(str(tmp / n) for n in arms)])
