import numpy as np

from improv.prompting import TEMPLATES
from improv.taskgen import CLASSES, TASKS
from improv.textenc import PAD, UNK, TextEncoder, TextVocab, default_encoder, tokenize


def test_empty_prompt():
    p = tokenize("")
    assert p.empty and p.length == 0 and np.all(p.token_ids == PAD) and len(p.token_ids) == 32


def test_simple_lookup():
    enc = default_encoder()
    p = tokenize("Image Segmentation")
    assert list(p.token_ids[:2]) == [enc.vocab.lookup("image"), enc.vocab.lookup("segmentation")]
    assert np.all(p.token_ids[2:] == PAD)


def test_table_one_string():
    p = tokenize("Left - input image, right: Black and white foreground background segmentation of a horse")
    assert p.length == 13 and UNK not in p.token_ids[:13]


def test_unknown_word_maps_to_unk():
    assert tokenize("zebra").token_ids[0] == UNK


def test_truncation():
    assert tokenize(" ".join(["red"] * 50)).length == 32


def test_vocab_stable_and_bounded():
    a, b = TextVocab(), TextVocab()
    assert a.word_to_id == b.word_to_id and len(a) <= 512
    assert a.lookup("<pad>") == PAD and a.lookup("<unk>") == UNK


def test_all_templates_tokenize_without_unk():
    for task in TASKS:
        for phrase in TEMPLATES[task][:2]:
            assert UNK not in tokenize(phrase).token_ids
        for cls in CLASSES:
            assert UNK not in tokenize(TEMPLATES[task][1] + TEMPLATES[task][2].format(cls=cls)).token_ids


def test_embed_rows():
    enc = default_encoder()
    assert np.all(enc.embed(tokenize("")).data == 0)
    a = enc.embed(tokenize("a red circle")).data
    b = enc.embed(tokenize("a red circle")).data
    c = enc.embed(tokenize("a blue circle")).data
    assert np.array_equal(a, b)
    assert [i for i in range(32) if not np.array_equal(a[i], c[i])] == [1]
    assert np.all(a[3:] == 0)


def test_table_frozen_and_seeded():
    enc = default_encoder()
    assert not enc.table.flags.writeable
    assert np.array_equal(TextEncoder().table, enc.table)
    assert enc.table.shape == (len(enc.vocab), 32)


def test_detokenize_idempotent():
    enc = default_encoder()
    p = tokenize("Colorization results: Left - input image, Right - Colorized image of red circle")
    again = tokenize(enc.detokenize(p))
    assert np.array_equal(again.token_ids, p.token_ids)


def test_vocab_dump(tmp_path):
    v = TextVocab()
    v.dump(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines[0] == "<pad>\t0" and lines[1] == "<unk>\t1" and len(lines) == len(v)
