"""Full CoNLL-2003 English run: train, then score the test split per layer.

Expects ``eng.train``, ``eng.testa`` and ``eng.testb`` under ``--data`` and a
50-d text embedding file. Takes many hours on one core. Targets are final-layer
test F1 of 91.44 with the character CNN and 90.78 without, each within 1.0.
"""

import argparse
import logging
import sys
from pathlib import Path

from nereasoner import cli
from nereasoner.evaluation import layer_diff
from nereasoner.ingest import CONLL2003, read_conll
from nereasoner.model import load_checkpoint

TARGETS = {"cnn": 91.44, "none": 90.78}
TOLERANCE = 1.0


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--embeddings", required=True)
    ap.add_argument("--char-encoder", choices=sorted(TARGETS), default="cnn")
    ap.add_argument("--output", default="conll_run")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    data = Path(args.data)
    code = cli.main(["train", "--train", str(data / "eng.train"), "--dev", str(data / "eng.testa"),
                     "--embeddings", args.embeddings, "--output", args.output, "--seed", str(args.seed),
                     "--tag-column", "3", "--set", f"char_encoder={args.char_encoder}", *sum(
                         (["--set", kv] for kv in args.set), [])])
    if code:
        return code
    model = load_checkpoint(Path(args.output) / cli.CHECKPOINT_NAME)
    report = layer_diff(model.predict(read_conll(data / "eng.testb", CONLL2003)))
    for layer in report.layers:
        print(layer.format())
    target = TARGETS[args.char_encoder]
    f1 = report.layers[-1].f1
    ok = abs(f1 - target) <= TOLERANCE
    print(f"{'PASS' if ok else 'FAIL'}: final-layer test F1 {f1:.2f}, target {target:.2f} +/- {TOLERANCE}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
