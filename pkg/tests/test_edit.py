"""Edit scripts over a sample's conditions."""

import json

import numpy as np
import pytest

from seqlidar import l4dt
from seqlidar.codec import SensorConfig, render_box_layer
from seqlidar.edit import EditScript, apply_edits
from seqlidar.errors import ValidationError, VocabularyError
from seqlidar.scene import (
    check_consistency,
    read_boxes,
    read_caption,
    read_sample,
    record_box,
    render_prior_frame,
    simulate_sequence,
    synth_world,
    write_sample,
)

CFG = SensorConfig()
CAR = {"op": "add_box", "category": "car", "l": 4.2, "w": 1.8, "h": 1.5, "rho": 10.0, "theta": 0.0,
       "heading": 0.0}


@pytest.fixture(scope="module")
def sample_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("src")
    return write_sample(root, simulate_sequence(synth_world(4), 3, CFG), CFG)


def script(*ops):
    return EditScript.parse("\n".join(json.dumps(op) for op in ops))


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def new_records(src, out):
    old_ids = {r["id"] for r in read_boxes(src / "boxes.jsonl")}
    return [r for r in read_boxes(out / "boxes.jsonl") if r["id"] not in old_ids]


class TestParse:
    def test_comments_and_blank_lines(self):
        s = EditScript.parse('# header\n\n{"op": "remove_box", "id": 2}\n')
        assert len(s.ops) == 1 and s.ops[0].op == "remove_box" and s.ops[0].line == 3

    @pytest.mark.parametrize("text", ['{"op": "explode"}', "not json", "[1, 2]"])
    def test_rejects(self, text):
        with pytest.raises(ValidationError, match="line 1"):
            EditScript.parse(text)


class TestApply:
    def test_empty_script_is_byte_identical(self, sample_dir, tmp_path):
        assert apply_edits(sample_dir, EditScript(), tmp_path / "out", CFG) == []
        assert files(tmp_path / "out") == files(sample_dir)

    def test_add_box_changes_exactly_its_pixels(self, sample_dir, tmp_path):
        out = tmp_path / "out"
        assert apply_edits(sample_dir, script(CAR), out, CFG) == [0, 1, 2]
        added = new_records(sample_dir, out)
        assert len(added) == 3 and {r["frame"] for r in added} == {0, 1, 2}
        for rec in added:
            k = rec["frame"]
            layer = render_box_layer([record_box(rec)], CFG)
            before, after = l4dt.load(sample_dir / f"sketch_{k}.l4dt"), l4dt.load(out / f"sketch_{k}.l4dt")
            assert np.array_equal(after[0], before[0])
            assert np.array_equal(after[1], np.maximum(before[1], layer))
            changed = np.any(after != before, axis=0)
            assert np.array_equal(changed, (layer > 0) & (before[1] == 0))
            own = render_prior_frame([rec], int(sample_dir.name), CFG)[0] > -1
            p0, p1 = l4dt.load(sample_dir / f"prior_{k}.l4dt"), l4dt.load(out / f"prior_{k}.l4dt")
            prior_changed = np.any(p1 != p0, axis=0)
            assert prior_changed.any() and not np.any(prior_changed & ~own)
        for name in ("frame_0.l4dt", "frame_2.l4dt", "caption.txt"):
            assert (out / name).read_bytes() == (sample_dir / name).read_bytes()
        assert check_consistency(read_sample(out), CFG) == []

    def test_frame_subset_leaves_other_frames_untouched(self, sample_dir, tmp_path):
        out = tmp_path / "out"
        assert apply_edits(sample_dir, script(dict(CAR, frames=[1])), out, CFG) == [1]
        for k in (0, 2):
            for kind in ("sketch", "prior"):
                name = f"{kind}_{k}.l4dt"
                assert (out / name).read_bytes() == (sample_dir / name).read_bytes()
        assert (out / "sketch_1.l4dt").read_bytes() != (sample_dir / "sketch_1.l4dt").read_bytes()

    def test_add_then_remove_restores_conditions(self, sample_dir, tmp_path):
        apply_edits(sample_dir, script(dict(CAR, id=50)), tmp_path / "a", CFG)
        apply_edits(tmp_path / "a", script({"op": "remove_box", "id": 50}), tmp_path / "b", CFG)
        for k in range(3):
            for kind in ("sketch", "prior"):
                name = f"{kind}_{k}.l4dt"
                assert np.array_equal(l4dt.load(tmp_path / "b" / name), l4dt.load(sample_dir / name))

    def test_edits_of_edited_copies_keep_object_seeds(self, sample_dir, tmp_path):
        apply_edits(sample_dir, script({"op": "set_caption_token", "slot": "weather", "token": "RAIN"}),
                    tmp_path / "renamed", CFG)
        apply_edits(tmp_path / "renamed", script({"op": "regenerate_prior", "id": 0, "frames": [1]}),
                    tmp_path / "out", CFG)
        for name in ("prior_0.l4dt", "prior_2.l4dt", "sketch_1.l4dt"):
            assert (tmp_path / "out" / name).read_bytes() == (sample_dir / name).read_bytes()

    def test_regenerate_without_seed_is_deterministic(self, sample_dir, tmp_path):
        op = script({"op": "regenerate_prior", "id": 0})
        apply_edits(sample_dir, op, tmp_path / "a", CFG)
        apply_edits(sample_dir, op, tmp_path / "b", CFG)
        assert files(tmp_path / "a") == files(tmp_path / "b")
        assert files(tmp_path / "a")["prior_0.l4dt"] != files(sample_dir)["prior_0.l4dt"]

    def test_caption_token_changes_one_token(self, sample_dir, tmp_path):
        before = read_caption(sample_dir / "caption.txt")
        current = (sample_dir / "caption.txt").read_text().split()
        token = "GRASSY" if current[2] != "GRASSY" else "TREES"
        apply_edits(sample_dir, script({"op": "set_caption_token", "slot": "background", "token": token}),
                    tmp_path / "out", CFG)
        after = read_caption(tmp_path / "out" / "caption.txt")
        assert len(after) == len(before) and sum(a != b for a, b in zip(after, before)) == 1
        assert (tmp_path / "out" / "caption.txt").read_text().split()[2] == token

    def test_regenerate_prior_touches_only_that_object(self, sample_dir, tmp_path):
        out = tmp_path / "out"
        apply_edits(sample_dir, script(dict(CAR, id=60)), tmp_path / "a", CFG)
        apply_edits(tmp_path / "a", script({"op": "regenerate_prior", "id": 60, "seed": 123}), out, CFG)
        rec = [r for r in read_boxes(out / "boxes.jsonl") if r["id"] == 60 and r["frame"] == 0][0]
        assert rec["prior_seed"] == 123
        old = [r for r in read_boxes(tmp_path / "a" / "boxes.jsonl") if r["id"] == 60 and r["frame"] == 0][0]
        assert old["prior_seed"] != 123
        own = render_prior_frame([rec], 0, CFG)[0] > -1
        own |= render_prior_frame([old], 0, CFG)[0] > -1
        a, b = l4dt.load(tmp_path / "a" / "prior_0.l4dt"), l4dt.load(out / "prior_0.l4dt")
        assert not np.any(np.any(a != b, axis=0) & ~own)
        assert (out / "sketch_0.l4dt").read_bytes() == (tmp_path / "a" / "sketch_0.l4dt").read_bytes()

    @pytest.mark.parametrize(
        "op, error",
        [
            (dict(CAR, rho=95.0), ValidationError),
            ({"op": "set_caption_token", "slot": "background", "token": "SNOW"}, VocabularyError),
            ({"op": "set_caption_token", "slot": "weather", "token": "GRASSY"}, ValidationError),
            ({"op": "set_caption_token", "slot": "mood", "token": "DAY"}, ValidationError),
            ({"op": "remove_box", "id": 999}, ValidationError),
            ({"op": "regenerate_prior", "id": 999}, ValidationError),
            (dict(CAR, frames=[7]), ValidationError),
            ({"op": "add_box", "category": "car"}, ValidationError),
        ],
    )
    def test_invalid_edits_write_nothing(self, sample_dir, tmp_path, op, error):
        with pytest.raises(error, match="line 1"):
            apply_edits(sample_dir, script(op), tmp_path / "out", CFG)
        assert not (tmp_path / "out").exists()
