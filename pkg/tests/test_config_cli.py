import json
from pathlib import Path

import numpy as np
import pytest

from visrep.assembly import extract_embedding
from visrep.config import (
    RunConfig,
    SEED_ENV_VAR,
    derive_seed,
    load_config,
    parse_config,
    write_config,
)
from visrep.cli import main
from visrep.data import decode_image, load_manifest
from visrep.errors import ConfigError
from visrep.vrt import read_tensor


# ---------------------------------------------------------------------------
# config format


def test_default_config_round_trips_byte_exactly():
    text = write_config(RunConfig())
    assert write_config(parse_config(text)) == text


def test_custom_values_survive_round_trip():
    cfg = RunConfig()
    cfg.seed = 41
    cfg.model.family = "vit"
    cfg.model.width_per_stage = [24]
    cfg.model.depth_per_stage = [3]
    cfg.model.stages = 1
    cfg.model.heads = 4
    cfg.model.downsamples = 2
    cfg.train.base_lr = 3e-4
    cfg.train.eps = 1e-7
    cfg.train.mode = "linear_probe"
    cfg.data.synthetic = False
    cfg.data.manifests = ["a.tsv", "b.tsv"]
    cfg.eval.ks = [1, 5, 20]
    text = write_config(cfg)
    back = parse_config(text)
    assert back.model.downsamples == 2
    assert back.train.eps == 1e-7
    assert back.data.manifests == ["a.tsv", "b.tsv"]
    assert back.eval.ks == [1, 5, 20]
    assert write_config(back) == text


def test_sparse_config_fills_defaults():
    cfg = parse_config("[run]\nseed = 9\n\n[train]\nepochs = 3\n")
    assert cfg.seed == 9
    assert cfg.train.epochs == 3
    assert cfg.train.base_lr == 2e-4
    assert cfg.model.family == "convnet"
    assert cfg.eval.ks == [5, 10]


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config("# top\n\n[run]\n# mid\nseed = 4\n")
    assert cfg.seed == 4


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[model]\nfamili = vit\n", "model.famili"),
        ("[run]\nsneed = 2\n", "run.sneed"),
        ("[widgets]\nx = 1\n", "unknown section"),
        ("[train]\nseed = 7\n", "train.seed"),
        ("[train]\nepochs = many\n", "train.epochs"),
        ("[model]\nnormalize = kinda\n", "model.normalize"),
        ("[run]\nseed = 1\nseed = 2\n", "duplicate"),
        ("[run]\njust words\n", "key = value"),
    ],
)
def test_malformed_configs_are_rejected_with_location(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_none_spelling_for_optional_fields():
    cfg = parse_config("[train]\neps = none\n\n[model]\ndownsamples = none\n")
    assert cfg.train.eps is None
    assert cfg.model.downsamples is None


# ---------------------------------------------------------------------------
# seed fan-out


def test_derived_seeds_are_stable_and_distinct():
    a = derive_seed(0, "init")
    assert a == derive_seed(0, "init")
    others = {derive_seed(0, "sampler"), derive_seed(0, "data"), derive_seed(1, "init")}
    assert a not in others
    assert len(others) == 3


def test_env_var_overrides_config_seed(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text(write_config(RunConfig()), encoding="utf-8")
    monkeypatch.setenv(SEED_ENV_VAR, "123")
    assert load_config(path).seed == 123
    assert load_config(path, apply_env=False).seed == 0
    monkeypatch.setenv(SEED_ENV_VAR, "xyz")
    with pytest.raises(ConfigError, match=SEED_ENV_VAR):
        load_config(path)


# ---------------------------------------------------------------------------
# CLI end to end

CONV_CFG = """\
[run]
seed = 11

[model]
input_h = 16
input_w = 16
depth_per_stage = 1,1
width_per_stage = 8,8
embed_dim = 16

[train]
epochs = 2
warm_epochs_frozen = 1
batch_size = 8

[data]
synthetic = true
n_listings = 12
image_size = 16

[eval]
ks = 5
"""

VIT_CFG = """\
[run]
seed = 3

[model]
family = vit
input_h = 16
input_w = 16
depth_per_stage = 2
width_per_stage = 16
stages = 1
heads = 4
patch_size = 4
embed_dim = 16
head_style = pooler_dense

[train]
regime = single_task
epochs = 1
warm_epochs_frozen = 0
batch_size = 4

[data]
synthetic = true
n_listings = 8
image_size = 16

[eval]
ks = 5
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def conv_run(work):
    cfg = work / "conv.cfg"
    cfg.write_text(CONV_CFG.replace("seed = 11", f"seed = 11\noutput_dir = {work/'conv_run'}"))
    assert main(["train", str(cfg)]) == 0
    return work / "conv_run"


@pytest.fixture(scope="module")
def vit_run(work):
    cfg = work / "vit.cfg"
    cfg.write_text(VIT_CFG.replace("seed = 3", f"seed = 3\noutput_dir = {work/'vit_run'}"))
    assert main(["train", str(cfg)]) == 0
    return work / "vit_run"


def test_gen_data_writes_manifests(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--listings", "8",
                 "--image-size", "16", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "query_log" in out
    assert (tmp_path / "c" / "shape.tsv").is_file()
    assert (tmp_path / "c" / "retrieval_intra_listing.tsv").is_file()


def test_train_writes_run_directory(conv_run):
    assert (conv_run / "resolved.cfg").is_file()
    assert (conv_run / "checkpoint" / "index.txt").is_file()
    assert (conv_run / "train_log.jsonl").is_file()
    assert (conv_run / "reports.jsonl").is_file()
    for name in ("loss_curve.png", "accuracy.png", "recall_curve.png", "recall_final.png"):
        assert (conv_run / name).is_file()
    # log lines parse and carry both step and epoch records
    lines = [json.loads(l) for l in (conv_run / "train_log.jsonl").read_text().splitlines()]
    kinds = {l["kind"] for l in lines}
    assert kinds == {"step", "epoch"}


def test_resolved_snapshot_lands_before_any_compute(work):
    cfg = work / "doomed.cfg"
    out = work / "doomed_run"
    cfg.write_text(
        f"[run]\noutput_dir = {out}\n\n[data]\nsynthetic = false\n", encoding="utf-8"
    )
    assert main(["train", str(cfg)]) == 2  # no manifests to train on
    assert (out / "resolved.cfg").is_file()
    assert not (out / "checkpoint").exists()


def test_resolved_snapshot_reparses_to_identical_bytes(conv_run):
    text = (conv_run / "resolved.cfg").read_text(encoding="utf-8")
    assert write_config(parse_config(text)) == text


def test_same_config_retrains_byte_identically(work, conv_run):
    cfg = work / "conv2.cfg"
    cfg.write_text(
        CONV_CFG.replace("seed = 11", f"seed = 11\noutput_dir = {work/'conv_run2'}")
    )
    assert main(["train", str(cfg)]) == 0
    other = work / "conv_run2"
    assert (other / "reports.jsonl").read_bytes() == (conv_run / "reports.jsonl").read_bytes()
    ours = sorted(p.name for p in (conv_run / "checkpoint").iterdir())
    theirs = sorted(p.name for p in (other / "checkpoint").iterdir())
    assert ours == theirs
    for name in ours:
        assert (other / "checkpoint" / name).read_bytes() == (
            conv_run / "checkpoint" / name
        ).read_bytes()


def test_env_seed_changes_resolved_snapshot(work, monkeypatch):
    cfg = work / "envseed.cfg"
    cfg.write_text(
        f"[run]\nseed = 5\noutput_dir = {work/'env_run'}\n\n[data]\nsynthetic = false\n"
    )
    monkeypatch.setenv(SEED_ENV_VAR, "77")
    main(["train", str(cfg)])  # fails later (no manifests); snapshot is enough
    snap = load_config(work / "env_run" / "resolved.cfg", apply_env=False)
    assert snap.seed == 77


def test_evaluate_reuses_run_and_writes_reports(conv_run, capsys):
    assert main(["evaluate", "--run", str(conv_run), "--ks", "3"]) == 0
    out = capsys.readouterr().out
    assert "intra_listing" in out
    lines = (conv_run / "eval_reports.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    assert {r["K"] for r in recs} == {3}
    assert {r["dataset"] for r in recs} == {
        "intra_listing", "intra_listing_reviews", "visually_similar_clicks"
    }
    assert (conv_run / "eval_recall.png").is_file()


def test_evaluate_missing_run_dir_is_config_error(tmp_path):
    assert main(["evaluate", "--run", str(tmp_path / "nope")]) == 2


def test_evaluate_with_no_datasets_exits_2(work, conv_run):
    # a run trained from explicit manifests has no implied retrieval sets
    corpus = conv_run / "corpus"
    cfg = work / "explicit.cfg"
    out = work / "explicit_run"
    cfg.write_text(
        "[run]\nseed = 2\noutput_dir = {}\n\n[model]\ninput_h = 16\ninput_w = 16\n"
        "depth_per_stage = 1\nwidth_per_stage = 8\nstages = 1\nembed_dim = 8\n\n"
        "[train]\nregime = single_task\nepochs = 1\nwarm_epochs_frozen = 0\n"
        "batch_size = 4\n\n[data]\nsynthetic = false\nmanifests = {}\n".format(
            out, corpus / "shape.tsv"
        )
    )
    assert main(["train", str(cfg)]) == 0
    assert not (out / "reports.jsonl").exists()
    assert main(["evaluate", "--run", str(out)]) == 2
    manifest = conv_run / "corpus" / "retrieval_intra_listing.tsv"
    assert main(["evaluate", "--run", str(out), "--dataset", str(manifest)]) == 0


def test_embed_matrix_and_sidecar(conv_run, work):
    manifest_path = conv_run / "corpus" / "shape.tsv"
    out = work / "emb" / "shape.vrt"
    assert main(["embed", "--run", str(conv_run), "--manifest", str(manifest_path),
                 "--out", str(out)]) == 0
    matrix = read_tensor(out)
    manifest = load_manifest(manifest_path)
    assert matrix.shape == (len(manifest.rows), 16)
    ids = (work / "emb" / "shape.vrt.ids").read_text().splitlines()
    assert ids == [r.listing_id for r in manifest.rows]

    first = read_tensor(out).tobytes()
    assert main(["embed", "--run", str(conv_run), "--manifest", str(manifest_path),
                 "--out", str(out)]) == 0
    assert read_tensor(out).tobytes() == first


def test_embed_rows_match_single_image_path(conv_run):
    from visrep.cli import _restore_run

    _, _, model = _restore_run(conv_run)
    manifest = load_manifest(conv_run / "corpus" / "shape.tsv")
    out = conv_run / "spot.vrt"
    assert main(["embed", "--run", str(conv_run), "--manifest",
                 str(conv_run / "corpus" / "shape.tsv"), "--out", str(out)]) == 0
    matrix = read_tensor(out)
    rng = np.random.default_rng(0)
    for idx in rng.choice(len(manifest.rows), size=5, replace=False):
        row = manifest.rows[int(idx)]
        single = extract_embedding(model, decode_image(manifest.resolve(row)))
        assert np.allclose(matrix[int(idx)], single.vector, atol=1e-6)


def test_scale_zero_exponent_echoes_base(work, capsys):
    cfg = work / "scale.cfg"
    cfg.write_text(CONV_CFG, encoding="utf-8")
    assert main(["scale", str(cfg), "--alpha", "1.2", "--beta", "1.1",
                 "--gamma", "1.15", "-n", "0"]) == 0
    out = dict(
        line.split("\t", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    assert out["depth_per_stage"] == "1,1"
    assert out["width_per_stage"] == "8,8"
    assert out["input_size"] == "16x16x3"


def test_scale_param_count_matches_built_model(work, capsys):
    from visrep.arch import ScalingCoefficients, build_backbone, compound_scale

    cfg = work / "scale.cfg"
    cfg.write_text(CONV_CFG, encoding="utf-8")
    assert main(["scale", str(cfg), "--alpha", "1.2", "--beta", "1.1",
                 "--gamma", "1.15", "-n", "2"]) == 0
    out = dict(
        line.split("\t", 1) for line in capsys.readouterr().out.strip().splitlines()
    )
    base = load_config(cfg).model.to_arch_spec()
    scaled = compound_scale(base, ScalingCoefficients(1.2, 1.1, 1.15, 2.0))
    assert int(out["param_count"]) == build_backbone(scaled, rng_seed=0).param_count()


def test_scale_rejects_base_below_one(work):
    cfg = work / "scale.cfg"
    cfg.write_text(CONV_CFG, encoding="utf-8")
    assert main(["scale", str(cfg), "--alpha", "0.5", "--beta", "1", "--gamma", "1"]) == 2


def test_probe_writes_heads_plus_one_files(vit_run, work):
    image = vit_run / "corpus" / "images" / "L0000_0.ppm"
    out = work / "probe_out"
    assert main(["probe", "--run", str(vit_run), "--image", str(image),
                 "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["head0.ppm", "head1.ppm", "head2.ppm", "head3.ppm", "heatmaps.vrt"]


def test_probe_figure_flag_adds_panel(vit_run, work):
    image = vit_run / "corpus" / "images" / "L0001_0.ppm"
    out = work / "probe_fig"
    assert main(["probe", "--run", str(vit_run), "--image", str(image),
                 "--out", str(out), "--figure", "--axis", "key"]) == 0
    assert (out / "heatmaps.png").is_file()


def test_probe_is_deterministic(vit_run, work):
    image = vit_run / "corpus" / "images" / "L0002_0.ppm"
    a, b = work / "probe_a", work / "probe_b"
    for out in (a, b):
        assert main(["probe", "--run", str(vit_run), "--image", str(image),
                     "--out", str(out)]) == 0
    assert (a / "head0.ppm").read_bytes() == (b / "head0.ppm").read_bytes()
    assert (a / "heatmaps.vrt").read_bytes() == (b / "heatmaps.vrt").read_bytes()


def test_probe_on_attention_free_model_exits_3(conv_run, work):
    image = conv_run / "corpus" / "images" / "L0000_0.ppm"
    assert main(["probe", "--run", str(conv_run), "--image", str(image),
                 "--out", str(work / "probe_conv")]) == 3
