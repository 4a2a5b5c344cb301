"""End-to-end CLI pipeline shared by the CLI and acceptance tests."""

from vibe.cli import main

# Small enough to finish in a few seconds, large enough to exercise every stage.
SMALL = ["--classes", "3", "--dim", "8", "--n-per-class", "80", "--layout", "anchored"]
TRAIN = ["--total-iters", "300", "--estep-period", "100", "--batch-size", "64"]


def run(argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise AssertionError(f"vibe {' '.join(map(str, argv))} exited with {code}")


def run_pipeline(work, seed=0):
    """generate -> poison -> preprocess -> train -> eval -> infer-rules -> sweep.

    Returns the list of output files (binary artifacts and CSV reports).
    """
    w = work
    run(["generate", *SMALL, "--seed", seed, "--out", w / "train.vibf", "--test-out", w / "test.vibf"])
    run(["poison", "--in", w / "train.vibf", "--out", w / "poisoned.vibf", "--record", w / "record.json",
         "--kind", "all_to_one", "--seed", seed])
    run(["preprocess", "--in", w / "poisoned.vibf", "--out", w / "filtered.vibf", "--report", w / "pre.csv",
         "--distances", w / "dist.csv", "--knn", "10", "--delta", "0.58", "--seed", seed])
    run(["train", "--in", w / "filtered.vibf", "--params-out", w / "model.vibp", "--dump-coupling",
         w / "q.vibq", "--log", w / "train_log.csv", *TRAIN, "--seed", seed])
    run(["eval", "--params", w / "model.vibp", "--test", w / "test.vibf", "--record", w / "record.json",
         "--coupling", w / "q.vibq", "--train", w / "filtered.vibf", "--out", w / "eval.csv"])
    run(["infer-rules", "--params", w / "model.vibp", "--record", w / "record.json", "--out", w / "rules.csv"])
    run(["sweep", "--train", w / "filtered.vibf", "--test", w / "test.vibf", "--record", w / "record.json",
         "--grid", "lambda=10,25", *TRAIN, "--seed", seed, "--out", w / "sweep.csv"])
    return [w / n for n in ("train.vibf", "test.vibf", "poisoned.vibf", "record.json", "filtered.vibf",
                            "pre.csv", "dist.csv", "model.vibp", "q.vibq", "train_log.csv", "eval.csv",
                            "rules.csv", "sweep.csv")]


def drop_column(text, name):
    """CSV text without the named column (used for wall-clock columns)."""
    lines = text.splitlines()
    header = lines[0].split(",")
    if name not in header:
        return text
    j = header.index(name)
    return "\n".join(",".join(c for i, c in enumerate(line.split(",")) if i != j) for line in lines)


def stable_bytes(path):
    """File contents with wall-clock timing columns removed."""
    if path.suffix == ".csv":
        text = path.read_text(encoding="utf-8")
        for col in ("wall_ms", "runtime_s"):
            text = drop_column(text, col)
        return text.encode()
    return path.read_bytes()
