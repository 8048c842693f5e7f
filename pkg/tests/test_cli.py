import csv

import numpy as np
import pytest

from davegan.cli import main
from davegan.data import make_checkerboard, read_image, read_manifest, write_image


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-data", "--kind", "ellipse", "--num", "8", "--size", "32", "--out", str(root / "data"),
                 "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--preset", "ellipse",
                 "--epochs", "1", "--seed", "1"]) == 0
    return root


def test_make_data_ellipses(tmp_path):
    assert main(["make-data", "--kind", "ellipse", "--num", "100", "--size", "32", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 100
    assert len(read_manifest(tmp_path / "manifest.txt")) == 100


def test_make_data_tiles_and_checkerboard(tmp_path):
    write_image(tmp_path / "big.pgm", make_checkerboard(256, 8))
    assert main(["make-data", "--kind", "tiles", "--input", str(tmp_path / "big.pgm"), "--tile", "64",
                 "--out", str(tmp_path / "tiles")]) == 0
    assert len(list((tmp_path / "tiles").glob("*.pgm"))) == 16
    for name in ("c1", "c2"):
        assert main(["make-data", "--kind", "checkerboard", "--size", "32", "--num", "2",
                     "--out", str(tmp_path / name)]) == 0
    a = sorted((tmp_path / "c1").glob("*.pgm"))
    b = sorted((tmp_path / "c2").glob("*.pgm"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "model.dvgn").is_file() and (run / "losses.csv").is_file()
    text = (run / "config.txt").read_text()
    assert "beta = 1.0" in text and "batch_size = 32" in text


def test_train_rerun_identical(trained, tmp_path):
    assert main(["train", "--data", str(trained / "data"), "--out", str(tmp_path), "--preset", "ellipse",
                 "--epochs", "1", "--seed", "1"]) == 0
    assert (tmp_path / "losses.csv").read_bytes() == (trained / "run" / "losses.csv").read_bytes()


def test_missing_data_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--bogus"])
    assert exc.value.code == 2


@pytest.mark.parametrize("cmd", ["train", "generate", "reconstruct", "traverse", "make-data", "metrics"])
def test_help_and_seed(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0
    assert "--seed" in capsys.readouterr().out


def test_generate(trained, tmp_path):
    ckpt = str(trained / "run" / "model.dvgn")
    for name in ("a", "b"):
        assert main(["generate", "--checkpoint", ckpt, "--num", "4", "--out", str(tmp_path / name),
                     "--seed", "7"]) == 0
    files = sorted((tmp_path / "a").glob("*.pgm"))
    assert len(files) == 8
    assert all(read_image(p).shape == (32, 32) for p in files)
    assert [p.read_bytes() for p in files] == [p.read_bytes() for p in sorted((tmp_path / "b").glob("*.pgm"))]
    rounded = read_image(tmp_path / "a" / "gen_0000.rounded.pgm")
    assert set(np.unique(rounded)) <= {0.0, 1.0}


def test_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.dvgn"
    bad.write_bytes(b"DVGN" + (7).to_bytes(4, "little") + bytes(40))
    assert main(["generate", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 1
    assert "version 7" in capsys.readouterr().err
    assert main(["generate", "--checkpoint", str(tmp_path / "none.dvgn"), "--out", str(tmp_path)]) == 2


def test_reconstruct(trained, tmp_path):
    ckpt = str(trained / "run" / "model.dvgn")
    inputs = sorted((trained / "data").glob("*.pgm"))[:3]
    assert main(["reconstruct", "--checkpoint", ckpt, "--input", *map(str, inputs), "--out", str(tmp_path)]) == 0
    outs = sorted(tmp_path.glob("*.pgm"))
    assert len(outs) == 6
    assert (tmp_path / f"{inputs[0].stem}.recon.pgm").is_file()
    x, r = read_image(inputs[0]), read_image(tmp_path / f"{inputs[0].stem}.recon.pgm")
    r = np.clip(r, 1e-7, 1 - 1e-7)
    assert np.isfinite(-(x * np.log(r) + (1 - x) * np.log(1 - r)).mean())


def test_reconstruct_size_mismatch(trained, tmp_path, capsys):
    odd = tmp_path / "odd.pgm"
    write_image(odd, np.zeros((16, 16)))
    assert main(["reconstruct", "--checkpoint", str(trained / "run" / "model.dvgn"), "--input", str(odd)]) == 2
    assert "odd.pgm" in capsys.readouterr().err


def test_traverse(trained, tmp_path):
    ckpt = str(trained / "run" / "model.dvgn")
    img = str(sorted((trained / "data").glob("*.pgm"))[0])
    assert main(["traverse", "--checkpoint", ckpt, "--input", img, "--out", str(tmp_path / "g.pgm")]) == 0
    assert read_image(tmp_path / "g.pgm").shape == (5 * 32, 13 * 32)
    assert main(["traverse", "--checkpoint", ckpt, "--input", img, "--range", "0", "--steps", "3",
                 "--out", str(tmp_path / "flat.pgm")]) == 0
    flat = read_image(tmp_path / "flat.pgm")
    cols = [flat[:, k * 32 : (k + 1) * 32] for k in range(3)]
    assert cols[0].tobytes() == cols[1].tobytes() == cols[2].tobytes()


def test_metrics(tmp_path, capsys):
    assert main(["make-data", "--kind", "checkerboard", "--size", "32", "--num", "3",
                 "--out", str(tmp_path / "cb")]) == 0
    assert main(["make-data", "--kind", "ellipse", "--num", "4", "--out", str(tmp_path / "el")]) == 0
    cb = str(tmp_path / "cb" / "manifest.txt")
    el = str(tmp_path / "el" / "manifest.txt")
    assert main(["metrics", "--set-a", cb, "--set-b", cb, "--mode", "rec", "--out", str(tmp_path / "m.csv")]) == 0
    assert "E_rec = 0" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert rows[-1]["structure_id"] == "mean" and float(rows[-1]["e_rec"]) == 0.0
    assert float(rows[0]["v_f"]) == 0.5
    sub = tmp_path / "sub.txt"
    sub.write_text("\n".join(str(p) for p in read_manifest(el)[:2]) + "\n")
    assert main(["metrics", "--set-a", str(sub), "--set-b", el, "--mode", "gen"]) == 0
    assert "E_gen = 0" in capsys.readouterr().out
    assert main(["metrics", "--set-a", cb, "--set-b", el, "--mode", "rec"]) == 2
