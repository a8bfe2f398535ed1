import json

import pytest

from fedblock import cli
from fedblock.enrichment import AssociatedDomains, WhoisLog, build_bundle, write_fixture
from fedblock.synthetic import make_synthetic_bundles, write_synthetic_workspace


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    bundles, labels, _ = make_synthetic_bundles(200, seed=4)
    n_bad = sum(1 for y in labels if y == 0)
    manifest = write_synthetic_workspace(root, bundles, labels, block_list_size=n_bad // 2 + 1)
    return root, manifest


def test_ingest_counts_and_determinism(capsys, workspace, tmp_path):
    root, manifest = workspace
    code, out, err = run(capsys, "--seed", 3, "ingest", manifest, tmp_path / "a.jsonl")
    assert code == 0
    counts = out.splitlines()[0]
    assert counts.startswith("label0=") and " label1=" in counts
    assert "lists_used=3" in out
    manifest_line = [ln for ln in err.splitlines() if ln.startswith("manifest: ")][0]
    echoed = json.loads(manifest_line[len("manifest: "):])
    assert echoed["seed"] == 3 and echoed["command"] == "ingest"
    run(capsys, "--seed", 3, "ingest", manifest, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_missing_list_file_names_the_path(capsys, tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"lists": [{"id": "x", "path": "gone.txt", "title": "t"}]}))
    code, _, err = run(capsys, "ingest", tmp_path / "m.json", tmp_path / "out.jsonl")
    assert code != 0 and "gone.txt" in err


def test_embed_counts_blank_whois(capsys, tmp_path):
    fx = tmp_path / "fx"
    lines = []
    for i in range(10):
        name = f"site{i}.example.com"
        whois = [] if i < 2 else [f"Registrar: R{i}", "Country: PA"]
        write_fixture(fx, build_bundle(name, WhoisLog(whois), AssociatedDomains(frozenset())))
        lines.append(json.dumps({"domain": name, "label": i % 2, "source": "t"}))
    (tmp_path / "c.jsonl").write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "embed", tmp_path / "c.jsonl", fx, tmp_path / "i.jsonl", "--dim", 8)
    assert code == 0
    assert "instances=8" in out and "rejected_blank=2" in out
    assert len((tmp_path / "i.jsonl").read_text().splitlines()) == 8


def test_pipeline_composes_and_manifest_verifies(capsys, workspace, tmp_path):
    root, manifest = workspace
    corpus, inst, model = tmp_path / "c.jsonl", tmp_path / "i.jsonl", tmp_path / "m.npz"
    assert run(capsys, "ingest", manifest, corpus)[0] == 0
    assert run(capsys, "embed", corpus, root / "fixtures", inst, "--dim", 16)[0] == 0
    code, out, _ = run(capsys, "--manifest-out", tmp_path / "run.json", "train", inst, model,
                       "--epochs", 20)
    assert code == 0 and out.startswith("epochs=20")
    assert cli.verify_manifest(tmp_path / "run.json") == []
    assert (tmp_path / "m.loss.csv").read_text().splitlines()[0] == "epoch,loss"
    code, out, _ = run(capsys, "eval", model, inst)
    report = json.loads(out)
    assert set(report) == {"accuracy", "roc_auc", "f1", "tp", "fp", "tn", "fn"}
    assert report["accuracy"] >= 0.9
    inst.write_text(inst.read_text() + "\n")
    assert cli.verify_manifest(tmp_path / "run.json") == [str(inst)]


def test_baseline_reports_both_models(capsys, workspace, tmp_path):
    root, manifest = workspace
    corpus = tmp_path / "c.jsonl"
    run(capsys, "ingest", manifest, corpus)
    code, out, _ = run(capsys, "baseline", corpus, root / "fixtures", "--dim", 16, "--epochs", 30,
                       "--folds", 3, "--out", tmp_path / "b.json", "--features-csv", tmp_path / "f.csv")
    assert code == 0
    assert "Our Neural Network" in out and "RandomForest" in out and "3-fold CV" in out
    result = json.loads((tmp_path / "b.json").read_text())
    assert set(result["mlp"]) == set(result["forest"]) == set(result["mlp_validation"])
    assert result["n_val"] > 0 and "validation accuracy" in out
    assert (tmp_path / "f.csv").read_text().startswith("domain,")


def test_experiment_writes_table_rows(capsys, workspace, tmp_path):
    root, manifest = workspace
    corpus, inst = tmp_path / "c.jsonl", tmp_path / "i.jsonl"
    run(capsys, "ingest", manifest, corpus)
    run(capsys, "embed", corpus, root / "fixtures", inst, "--dim", 8)
    grid = {"n_clients": 10, "unique_per_client": 10, "new_domains": 20, "base_size": 20, "rounds": 2,
            "repeats": 1, "sync_interval": 2, "hidden": [[6, "relu"]], "probe_rounds": 1}
    (tmp_path / "g.json").write_text(json.dumps(grid))
    code, out, _ = run(capsys, "experiment", inst, "--test", inst, "--grid", tmp_path / "g.json",
                       "--out-dir", tmp_path / "out")
    assert code == 0
    assert out.splitlines()[0].startswith("0,[10, 10, 20],")
    t6 = (tmp_path / "out" / "table6.csv").read_text().splitlines()
    assert len(t6) == 2 and t6[0].startswith("Experiment Number,")
    assert t6[1].startswith('0,"[10, 10, 20]",')
    assert (tmp_path / "out" / "table7.csv").read_text().splitlines()[1].startswith("0,10,10,20,")


def test_unknown_config_section(capsys, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"bogus": {}}))
    code, _, err = run(capsys, "--config", tmp_path / "cfg.json", "eval", "m", "i")
    assert code == 2 and "bogus" in err


def test_config_section_supplies_defaults(capsys, workspace, tmp_path):
    root, manifest = workspace
    corpus, inst = tmp_path / "c.jsonl", tmp_path / "i.jsonl"
    run(capsys, "ingest", manifest, corpus)
    (tmp_path / "cfg.json").write_text(json.dumps({"embedding": {"dim": 12}}))
    run(capsys, "--config", tmp_path / "cfg.json", "embed", corpus, root / "fixtures", inst)
    first = json.loads(inst.read_text().splitlines()[0])
    assert len(first["features"]) == 24
