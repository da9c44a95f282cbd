"""
The command-line pipeline
=========================

The same steps as ``advmm gen | train | eval | search | export`` on the
shell, driven from Python. Each command writes effective_config.json to
its output directory first; feeding that file back through --config
repeats the run exactly.
"""
import json
import tempfile
from pathlib import Path

from advmm import cli
from advmm.data import Sample, load_features, write_features
from advmm.presets import desk_config_file

work = Path(tempfile.mkdtemp(prefix="advmm-"))
cfg = desk_config_file()
cfg["train"]["max_steps"] = 1500  # a shorter run for the demo
(work / "config.json").write_text(json.dumps(cfg))
print("working in", work)


def advmm(*argv):
    code = cli.main([str(a) for a in argv])
    print(f"$ advmm {' '.join(map(str, argv))}  -> exit {code}")
    return code


advmm("gen", "--config", work / "config.json", "--out", work / "data", "--seed", 0)
advmm("train", "--config", work / "config.json", "--data", work / "data", "--out", work / "run")
ckpt = work / "run" / "checkpoint.bin"
advmm("eval", "--checkpoint", ckpt, "--data", work / "data", "--out", work / "eval")

# sentence-to-image search for two held-out sentences
test = load_features(work / "data" / "test.jsonl")
sentences = [s for s in test if s.domain == "text"][:2]
write_features(work / "queries.jsonl",
               [Sample("q-" + s.id, s.domain, s.feature, s.labels) for s in sentences],
               C=8, d_image_in=64, L=12, d_word=32)
advmm("search", "--checkpoint", ckpt, "--corpus", work / "data", "--queries",
      work / "queries.jsonl", "--k", 3, "--to-domain", "image", "--out", work / "search")
print("true partners:", [s.pair_id for s in sentences])

advmm("export", "--checkpoint", ckpt, "--data", work / "data", "--format", "csv", "--pca",
      "--out", work / "export")
print(sorted(p.name for p in (work / "export").iterdir()))

# errors map to exit codes: 2 config, 3 data, 4 numerical abort
advmm("train", "--data", work / "missing", "--out", work / "x")
