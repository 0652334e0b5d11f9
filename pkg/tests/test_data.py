import json

import numpy as np
import pytest
import torch
from PIL import Image

from medrpg.data import (GroundingSample, Letterbox, SplitSpec, intensity_stats, load_annotations, make_box,
                         prepare, preprocess, split_by_patient, write_annotations)
from medrpg.errors import (BoxOutOfFrameError, ConfigError, DataError, DuplicateIdError, GenerationError,
                           ImageReadError, MissingFieldError)
from medrpg.geometry import NORMALIZED, BoundingBox, Convention, Frame, convert
from medrpg.synthetic import (ATTRIBUTES, SyntheticConfig, SyntheticGenerator, attribute_counts,
                              generate_synthetic, manifest_bytes, write_dataset)
from medrpg.tokenizer import WordTokenizer


def sample(i, w=32, h=32, box=(4, 4, 8, 8), patient=None, dtype=np.uint8):
    img = (np.arange(w * h).reshape(h, w) % 251).astype(dtype)
    return GroundingSample(f"s{i}", img, w, h, "left lung opacity", make_box(box, w, h, f"s{i}"),
                           patient or f"p{i}")


def write_records(tmp_path, records, images=True):
    if images:
        (tmp_path / "img").mkdir(exist_ok=True)
        for r in records:
            Image.fromarray(np.zeros((r["height"], r["width"]), np.uint8)).save(tmp_path / r["image"]) \
                if r.get("image", "").startswith("img/") else None
    path = tmp_path / "ann.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def record(i, **kw):
    r = {"id": f"r{i}", "image": f"img/r{i}.png", "width": 20, "height": 10, "patient_id": f"p{i}",
         "phrase": "opacity", "bbox": [1, 1, 5, 5]}
    r.update(kw)
    return r


class TestLoadAnnotations:
    def test_three_records(self, tmp_path):
        path = write_records(tmp_path, [record(i) for i in range(3)])
        out = load_annotations(path)
        assert [s.id for s in out] == ["r0", "r1", "r2"]
        assert out[0].gt_box.convention is Convention.XYWH_TOPLEFT
        assert out[0].gt_box.frame == Frame.pixel(20, 10)
        assert out[0].image.shape == (10, 20)

    def test_box_out_of_frame(self, tmp_path):
        path = write_records(tmp_path, [record(0), record(1, bbox=[15, 2, 8, 3])])
        with pytest.raises(BoxOutOfFrameError, match="r1"):
            load_annotations(path)

    def test_duplicates(self, tmp_path):
        path = write_records(tmp_path, [record(0), record(1), record(0, patient_id="x")])
        with pytest.raises(DuplicateIdError, match="r0"):
            load_annotations(path)

    def test_missing_field(self, tmp_path):
        r = record(0)
        del r["phrase"]
        path = write_records(tmp_path, [record(1), r])
        with pytest.raises(MissingFieldError, match=":2:.*phrase"):
            load_annotations(path)

    def test_unreadable_image(self, tmp_path):
        path = write_records(tmp_path, [record(0, image="nowhere.png")], images=False)
        with pytest.raises(ImageReadError):
            load_annotations(path)

    def test_image_size_mismatch(self, tmp_path):
        path = write_records(tmp_path, [record(0)])
        Image.fromarray(np.zeros((7, 7), np.uint8)).save(tmp_path / "img/r0.png")
        with pytest.raises(DataError, match="r0"):
            load_annotations(path)

    def test_single_word_phrase_and_16bit(self, tmp_path):
        s = sample(0, dtype=np.uint16)
        s.image[:] = 40000
        s.phrase = "Pneumothorax"
        ann = write_annotations([s], tmp_path)
        (loaded,) = load_annotations(ann)
        assert loaded.image.dtype == np.uint16 and int(loaded.image.max()) == 40000
        assert loaded.phrase == "Pneumothorax"

    def test_write_read_round_trip(self, tmp_path):
        samples = [sample(i, box=(1.5, 2.25, 7, 3)) for i in range(4)]
        out = load_annotations(write_annotations(samples, tmp_path))
        for a, b in zip(samples, out):
            assert a.gt_box == b.gt_box and np.array_equal(a.image, b.image)


class TestSplit:
    def test_ratios(self):
        samples = [sample(i) for i in range(10)]
        tr, va, te = split_by_patient(samples, SplitSpec((0.7, 0.1, 0.2), seed=3))
        assert (len(tr), len(va), len(te)) == (7, 1, 2)

    def test_one_patient_stays_together(self):
        samples = [sample(i, patient="big") for i in range(50)] + [sample(50 + i) for i in range(9)]
        parts = split_by_patient(samples, SplitSpec(seed=1))
        holders = [p for p in parts if any(s.patient_id == "big" for s in p)]
        assert len(holders) == 1 and sum(s.patient_id == "big" for s in holders[0]) == 50

    def test_deterministic(self):
        samples = [sample(i) for i in range(30)]
        a = split_by_patient(samples, SplitSpec(seed=9))
        b = split_by_patient(samples, SplitSpec(seed=9))
        assert [[s.id for s in p] for p in a] == [[s.id for s in p] for p in b]

    def test_no_leakage_100_patients(self):
        rng = np.random.default_rng(0)
        samples = [sample(i, patient=f"p{int(rng.integers(100)) if i >= 100 else i}") for i in range(400)]
        parts = split_by_patient(samples, SplitSpec((0.7, 0.1, 0.2), seed=0))
        sets = [{s.patient_id for s in p} for p in parts]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sum(len(p) for p in parts) == 400
        assert [len(s) for s in sets] == [70, 10, 20]

    def test_too_few_patients(self):
        with pytest.raises(DataError):
            split_by_patient([sample(0), sample(1)], SplitSpec())

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            SplitSpec((0.5, 0.5, 0.5))


class TestPreprocess:
    def test_square_resize(self):
        s = sample(0, 32, 32, (4, 6, 8, 10))
        img, gt, lb = preprocess(s, 64)
        assert tuple(img.shape) == (1, 64, 64)
        assert lb.offset == (0, 0)
        assert gt.coords == pytest.approx(convert(s.gt_box, Convention.CXCYWH, NORMALIZED).coords, abs=1e-12)
        px = convert(gt, Convention.XYWH_TOPLEFT, Frame.pixel(64, 64))
        assert px.coords == pytest.approx((8, 12, 16, 20), abs=1e-9)

    def test_landscape_letterbox_round_trip(self):
        s = sample(0, 80, 40, (10.5, 3.25, 30, 20.5))
        img, gt, lb = preprocess(s, 64)
        assert lb.content == (64, 32) and lb.offset == (0, 16)
        assert float(img[0, :16].abs().max()) == 0.0 and float(img[0, 48:].abs().max()) == 0.0
        back = lb.inverse_box(gt)
        assert back.coords == pytest.approx(s.gt_box.coords, abs=1e-6 * 80)
        bn = convert(back, Convention.CXCYWH, NORMALIZED).coords
        on = convert(s.gt_box, Convention.CXCYWH, NORMALIZED).coords
        assert max(abs(a - b) for a, b in zip(bn, on)) < 1e-6

    def test_full_frame_box(self):
        s = sample(0, 40, 80, (0, 0, 40, 80))
        _, gt, lb = preprocess(s, 64)
        assert gt.xyxy() == pytest.approx((16 / 64, 0.0, 48 / 64, 1.0), abs=1e-12)

    def test_normalization(self):
        samples = [sample(i) for i in range(3)]
        mean, std = intensity_stats(samples)
        img, _, _ = preprocess(samples[0], 32, (mean, std))
        assert abs(float(img.mean())) < 1e-5 and abs(float(img.std(unbiased=False)) - 1) < 1e-4

    def test_rgb_to_gray_and_gray_to_rgb(self):
        s = sample(0)
        rgb = GroundingSample("c", np.stack([s.image] * 3, -1), 32, 32, "x", s.gt_box, "p")
        a, _, _ = preprocess(rgb, 32)
        b, _, _ = preprocess(s, 32)
        assert torch.allclose(a, b, atol=1e-5)
        c, _, _ = preprocess(s, 32, channels=3)
        assert c.shape[0] == 3

    def test_prepare(self):
        samples = [sample(i, box=(2, 3, 4, 5)) for i in range(3)]
        tok = WordTokenizer.from_corpus(s.phrase for s in samples)
        p = prepare(samples, tok, 32, 8, (0.5, 0.25))
        assert p.images.shape == (3, 1, 32, 32) and p.tokens.shape == (3, 8) and p.gt.shape == (3, 4)
        assert p.gt_pixel_xyxy[0].tolist() == [2, 3, 6, 8]


class TestSynthetic:
    def test_manifest_deterministic(self):
        cfg = SyntheticConfig(n_samples=100, seed=7)
        _, m1 = generate_synthetic(cfg)
        _, m2 = generate_synthetic(cfg)
        assert manifest_bytes(m1) == manifest_bytes(m2)
        _, m3 = generate_synthetic(SyntheticConfig(n_samples=100, seed=8))
        assert manifest_bytes(m1) != manifest_bytes(m3)

    def test_written_manifest_identical(self, tmp_path):
        cfg = SyntheticConfig(n_samples=12, seed=7)
        write_dataset(cfg, tmp_path / "a")
        write_dataset(cfg, tmp_path / "b")
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
        assert len(load_annotations(tmp_path / "a/annotations.jsonl")) == 12

    @pytest.mark.parametrize("mode", ["minimal", "full"])
    def test_phrase_identifies_one_shape(self, mode):
        gen = SyntheticGenerator(SyntheticConfig(seed=3, phrase_mode=mode))
        for i in range(150):
            s, shapes, target = gen.sample(i)
            words = set(s.phrase.split()) - {"in", "the"}
            matches = []
            for sh in shapes:
                a = sh.attributes()
                described = {a["shape"], a["size"], a["intensity"], a["texture"], *a["position"]}
                if words <= described:
                    matches.append(sh)
            assert matches == [shapes[target]], (s.phrase, i)

    def test_gt_box_is_tight(self):
        gen = SyntheticGenerator(SyntheticConfig(seed=5))
        for i in range(60):
            s, shapes, target = gen.sample(i)
            mask = shapes[target].mask
            x, y, w, h = (int(v) for v in s.gt_box.coords)
            inside = mask[y:y + h, x:x + w].sum()
            assert inside == mask.sum()
            # eroding any side loses footprint pixels
            assert mask[y, x:x + w].any() and mask[y + h - 1, x:x + w].any()
            assert mask[y:y + h, x].any() and mask[y:y + h, x + w - 1].any()
            # dilating by one pixel strictly grows the box area
            assert (w + 2) * (h + 2) > w * h

    def test_box_inside_frame_and_patients_blocked(self):
        samples, _ = generate_synthetic(SyntheticConfig(n_samples=20, samples_per_patient=4))
        assert len({s.patient_id for s in samples}) == 5
        assert all(s.gt_box.frame == Frame.pixel(64, 64) for s in samples)

    def test_infeasible_layout(self):
        with pytest.raises(GenerationError):
            SyntheticGenerator(SyntheticConfig(image_size=32, min_shapes=40, max_shapes=40)).sample(0)

    def test_attribute_distribution_report(self):
        from scipy.stats import chisquare

        gen = SyntheticGenerator(SyntheticConfig(seed=11))
        counts = attribute_counts(gen.sample(i)[1] for i in range(400))
        for attr in ("shape", "intensity", "texture"):
            stat = chisquare(list(counts[attr].values()))
            print(f"chi2 {attr}: p={stat.pvalue:.3f} counts={counts[attr]}")
        assert set(counts["shape"]) == {"square", "circle", "triangle", "blob"}

    def test_queries_share_image_with_distinct_targets(self):
        gen = SyntheticGenerator(SyntheticConfig(seed=2, queries_per_image=2))
        for img in range(40):
            (a, sa, ta), (b, sb, tb) = gen.sample(2 * img), gen.sample(2 * img + 1)
            assert np.array_equal(a.image, b.image) and a.patient_id == b.patient_id
            assert ta != tb and a.gt_box != b.gt_box

    def test_queries_must_fit_patient_blocks(self):
        with pytest.raises(ConfigError):
            SyntheticConfig(samples_per_patient=3, queries_per_image=2)
