"""The full operational loop through the command-line surface.

Every step an operator would script is driven here through the same entry
point the `dhge` console command uses: generate a drift-stream fixture,
train a snapshot, absorb an increment, evaluate specific versions,
retrieve for one user, and finally replay the stream against a fresh
snapshot directory with a frozen-baseline comparison. Commands print one
JSON record per result line to stdout; progress goes to stderr.

Run: python3 demos/04_cli_walkthrough.py
"""
import glob
import os
import tempfile

from dhge.cli import main as dhge


def run(*argv):
    print("\n$ dhge " + " ".join(argv))
    code = dhge(list(argv))
    if code != 0:
        raise SystemExit("command failed with exit code %d" % code)


def main():
    work = tempfile.mkdtemp(prefix="dhge-demo4-")
    data = os.path.join(work, "data")
    snaps = os.path.join(work, "snapshots")
    cfg_path = os.path.join(work, "run.ini")

    run("gen-fixture", "drift-stream", "--out", data, "--n-users", "60",
        "--n-items", "40", "--communities", "2", "--n-batches", "2",
        "--users-per-batch", "5", "--seed", "3")

    with open(cfg_path, "w", encoding="utf-8") as fh:
        fh.write("""\
[paths]
edges = %s
features = %s
schema = %s
snapshot_dir = %s

[model]
hidden_dim = 16

[train]
epochs = 4

[eval]
k_values = 5, 10
negatives_per_user = 20

[pipeline]
rng_seed = 7
""" % (os.path.join(data, "edges.tsv"), os.path.join(data, "features.tsv"),
       os.path.join(data, "schema.tsv"), snaps))
    print("\nwrote %s" % cfg_path)

    run("train", "--config", cfg_path)
    batches = sorted(glob.glob(os.path.join(data, "increments", "*.edges.tsv")))
    run("update", "--config", cfg_path, "--increment-edges", batches[0],
        "--increment-features", batches[0].replace(".edges.", ".features."))

    base_test = os.path.join(data, "base_test.tsv")
    run("evaluate", "--config", cfg_path, "--test", base_test, "--version", "1")
    run("evaluate", "--config", cfg_path, "--test", base_test)  # latest (v2)

    run("retrieve", "--config", cfg_path, "--user", "0", "--k", "5")

    # replay the whole stream from a fresh snapshot lineage, comparing each
    # refresh against the frozen pre-stream table
    stream_snaps = os.path.join(work, "snapshots-stream")
    run("train", "--config", cfg_path, "--snapshot-dir", stream_snaps)
    run("simulate-stream", "--config", cfg_path, "--snapshot-dir", stream_snaps,
        "--increments", *batches, "--test", os.path.join(data, "test.tsv"),
        "--compare-frozen")

    print("\nsnapshot directory after the walkthrough:")
    for name in sorted(os.listdir(snaps)):
        print("  %s" % name)


if __name__ == "__main__":
    main()
