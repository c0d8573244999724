import json

import numpy as np
import pytest

from stylerec.datamodel import (
    DatasetError,
    ImageRecord,
    InteractionRecord,
    UserRecord,
    Vocabulary,
    VocabularyError,
    build_vocabulary,
    image_to_dict,
    iter_interactions,
    load_dataset,
    read_images,
    temporal_split,
    write_images,
    write_interactions,
    write_users,
)


def _image(image_id="i1", cats=("Food",), peaks=(("pale red", 0.5),), deep=None):
    return ImageRecord(image_id, cats, "FR", peaks, (), (), np.zeros(4) if deep is None else deep)


def test_interaction_rejects_empty_ids_and_negative_ts():
    with pytest.raises(DatasetError):
        InteractionRecord("", "i", 1)
    with pytest.raises(DatasetError):
        InteractionRecord("u", "i", -1)


def test_image_category_count_enforced():
    with pytest.raises(DatasetError):
        _image(cats=())
    with pytest.raises(DatasetError):
        _image(cats=("a", "b", "c"))
    assert _image(cats=("a", "b")).categories == ("a", "b")


@pytest.mark.parametrize("cov", [0.0, -0.1, 1.5])
def test_color_coverage_bounds(cov):
    with pytest.raises(DatasetError):
        _image(peaks=(("pale red", cov),))


def test_temporal_split_holds_out_latest():
    clicks = [InteractionRecord("u", f"i{t}", t) for t in (5, 1, 9, 3, 7, 2, 8, 4, 6, 0)]
    split = temporal_split(clicks, 0.2)
    assert [r.timestamp for r in split.test] == [8, 9]
    assert len(split.train) == 8
    assert max(r.timestamp for r in split.train) <= min(r.timestamp for r in split.test)


def test_temporal_split_rounds_test_size_up():
    clicks = [InteractionRecord("u", "i", t) for t in range(11)]
    assert len(temporal_split(clicks, 0.1).test) == 2


def test_temporal_split_ties_keep_input_order():
    clicks = [InteractionRecord("u", f"i{k}", 0) for k in range(4)]
    split = temporal_split(clicks, 0.25)
    assert split.test[0].image_id == "i3"


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.5])
def test_temporal_split_bad_fraction(frac):
    with pytest.raises(DatasetError):
        temporal_split([InteractionRecord("u", "i", 0)], frac)


def test_temporal_split_empty():
    with pytest.raises(DatasetError):
        temporal_split([], 0.1)


def _users(n):
    return {f"u{k}": UserRecord(f"u{k}", f"o{k % 2}", "FR", "fr", "basic") for k in range(n)}


def test_vocabulary_strict_threshold():
    users = _users(3)
    clicks = [InteractionRecord("u0", "i", t) for t in range(51)]
    clicks += [InteractionRecord("u1", "i", t) for t in range(50)]
    vocab = build_vocabulary(clicks, users, "user_id", 50, 4, strict=True)
    assert vocab.tokens == ("u0",)
    loose = build_vocabulary(clicks, users, "user_id", 50, 4, strict=False)
    assert loose.tokens == ("u0", "u1")
    assert loose.size == 6


def test_vocabulary_counts_through_records():
    users = _users(4)  # u0, u2 in o0; u1, u3 in o1
    clicks = [InteractionRecord(u, "i", 0) for u in ("u0", "u2", "u2", "u1")]
    vocab = build_vocabulary(clicks, users, "org_id", 2, 1, strict=True)
    assert vocab.tokens == ("o0",)


def test_vocabulary_min_count_zero_keeps_everything_in_records():
    users = _users(3)
    vocab = build_vocabulary([], users, "org_id", 0, 0)
    assert set(vocab.tokens) == {"o0", "o1"}


def test_vocabulary_errors():
    with pytest.raises(VocabularyError):
        build_vocabulary([], _users(1), "user_id", -1, 1)
    with pytest.raises(VocabularyError):
        build_vocabulary([], {}, "user_id", 1, 1)
    with pytest.raises(VocabularyError):
        build_vocabulary([], _users(1), "favourite_color", 1, 1)
    with pytest.raises(VocabularyError):
        build_vocabulary([InteractionRecord("ghost", "i", 0)], _users(1), "user_id", 1, 1)
    with pytest.raises(VocabularyError):
        Vocabulary("x", ("a", "a"), 1, 0)


def test_vocabulary_roundtrip(tmp_path):
    vocab = Vocabulary("org_id", ("b", "a"), 3, 7)
    vocab.save(tmp_path / "v.json")
    back = Vocabulary.load(tmp_path / "v.json")
    assert back == vocab and back.index == {"b": 0, "a": 1}


def _write_world(tmp_path):
    users = list(_users(2).values())
    images = [_image("i1"), _image("i2", cats=("A", "B"), peaks=(("dark blue", 0.3), ("pale red", 0.2)))]
    clicks = [InteractionRecord("u0", "i1", 3), InteractionRecord("u1", "i2", 4)]
    write_users(tmp_path / "users.jsonl", users)
    write_images(tmp_path / "images.jsonl", images)
    write_interactions(tmp_path / "interactions.jsonl", clicks)
    return users, images, clicks


def test_load_dataset_roundtrip(tmp_path):
    users, images, clicks = _write_world(tmp_path)
    inter, u, im = load_dataset(tmp_path / "interactions.jsonl", tmp_path / "users.jsonl", tmp_path / "images.jsonl")
    assert inter == clicks
    assert list(u.values()) == users
    assert image_to_dict(im["i2"]) == image_to_dict(images[1])


def test_load_dataset_reports_dangling_ids(tmp_path):
    _write_world(tmp_path)
    with open(tmp_path / "interactions.jsonl", "a") as fh:
        fh.write(json.dumps({"user_id": "nobody", "image_id": "i1", "ts": 9}) + "\n")
    with pytest.raises(DatasetError, match="nobody"):
        load_dataset(tmp_path / "interactions.jsonl", tmp_path / "users.jsonl", tmp_path / "images.jsonl")


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "interactions.jsonl"
    path.write_text('{"user_id": "u", "image_id": "i", "ts": 1}\n{not json\n')
    with pytest.raises(DatasetError, match=":2:"):
        list(iter_interactions(path))
    path.write_text('{"user_id": "u", "image_id": "i"}\n')
    with pytest.raises(DatasetError, match=":1:"):
        list(iter_interactions(path))


def test_deep_feature_width_must_agree(tmp_path):
    write_images(tmp_path / "images.jsonl", [_image("a"), _image("b", deep=np.zeros(5))])
    with pytest.raises(DatasetError, match="dims"):
        read_images(tmp_path / "images.jsonl")


def test_interactions_are_streamed(tmp_path):
    _write_world(tmp_path)
    it = iter_interactions(tmp_path / "interactions.jsonl")
    assert next(it).user_id == "u0"
