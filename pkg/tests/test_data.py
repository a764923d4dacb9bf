import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rremoe.data import (
    CorpusDoc, FormatError, SpecialTokens, TrainingInstance, decode_bytes, encode_bytes,
    format_doc, instance_stats, pack_pretrain, pack_tokens, pad_or_truncate, read_header,
    read_instances, synthetic_corpus, write_instances,
)

SP = SpecialTokens.reserve(300)
T1, T2 = 11, 12


def test_specials_reserved_at_top():
    assert SP.ids() == (294, 295, 296, 297, 298, 299)
    assert len(set(SP.ids())) == 6


def test_format_examples():
    assert format_doc(CorpusDoc(0, [T1, T2]), SP) == [T1, T2, SP.eot]
    assert format_doc(CorpusDoc(1, [T1], "cn", "bilingual"), SP) == [SP.cn, T1, SP.eot]
    assert format_doc(CorpusDoc(1, [T1], "en", "bilingual"), SP) == [SP.en, T1, SP.eot]
    assert format_doc(CorpusDoc(3, [], "python", "code"), SP) == [SP.python, SP.eot]
    assert format_doc(CorpusDoc(3, [T2], "java", "code"), SP) == [SP.java, T2, SP.eot]


@pytest.mark.parametrize("subtag,kind", [(None, "code"), ("en", "mono"), ("python", "bilingual"),
                                         ("cn", "code"), (None, "weird")])
def test_format_rejects_bad_subtags(subtag, kind):
    with pytest.raises(FormatError):
        format_doc(CorpusDoc(0, [1], subtag, kind), SP)


def test_pack_examples():
    out = list(pack_tokens([[1, 2, 3], [4, 5]], 2, 0))
    assert [i.token_ids.tolist() for i in out] == [[1, 2], [3, 4]]
    out = list(pack_tokens([[1, 2], [3, 4, 5, 6]], 3, 0))
    assert [i.token_ids.tolist() for i in out] == [[1, 2, 3], [4, 5, 6]]


@settings(max_examples=60)
@given(st.lists(st.lists(st.integers(0, 200), max_size=30), max_size=20), st.integers(1, 17))
def test_pack_matches_concat_then_slice(bodies, L):
    docs = [CorpusDoc(2, b) for b in bodies]
    out = pack_pretrain(docs, L, SP)
    stream = [t for d in docs for t in format_doc(d, SP)]
    k = len(stream) // L
    assert len(out) == k
    assert len(stream) - k * L < L
    for i, inst in enumerate(out):
        assert len(inst) == L and inst.domain_id == 2
        assert inst.token_ids.tolist() == stream[i * L : (i + 1) * L]


def test_pack_rejects_mixed_domains():
    with pytest.raises(FormatError):
        pack_pretrain([CorpusDoc(0, [1] * 10), CorpusDoc(1, [1] * 10)], 4, SP)


def test_pad_or_truncate_examples():
    assert pad_or_truncate([T1], 3, SP).token_ids.tolist() == [T1, SP.pad, SP.pad]
    assert pad_or_truncate([1, 2, 3], 3, SP).token_ids.tolist() == [1, 2, 3]
    long = list(range(8))
    assert pad_or_truncate(long, 3, SP).token_ids.tolist() == [0, 1, 2]


@given(st.lists(st.integers(0, 293), max_size=40), st.integers(1, 30))
def test_pad_only_as_suffix(seq, L):
    inst = pad_or_truncate(seq, L, SP)
    ids = inst.token_ids.tolist()
    assert len(ids) == L
    n_real = min(len(seq), L)
    assert ids[:n_real] == seq[:n_real]
    assert ids[n_real:] == [SP.pad] * (L - n_real)


def test_instance_file_round_trip(tmp_path, rng):
    insts = [TrainingInstance(int(rng.integers(3)), rng.integers(0, 2**20, size=8)) for _ in range(20)]
    path = tmp_path / "x.pgsi"
    write_instances(path, insts, num_domains=3)
    raw = path.read_bytes()
    assert raw[:4] == b"PGSI" and len(raw) == 24 + 20 * (4 + 8 * 4)
    assert read_header(path) == {"seq_len": 8, "num_domains": 3, "count": 20}
    assert read_instances(path) == insts


def test_empty_instance_file(tmp_path):
    path = tmp_path / "e.pgsi"
    write_instances(path, [], seq_len=16, num_domains=2)
    assert read_instances(path) == []
    assert read_header(path)["count"] == 0


def test_instance_file_corruption(tmp_path):
    path = tmp_path / "c.pgsi"
    write_instances(path, [TrainingInstance(0, [1, 2])])
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        read_instances(path)
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_instances(path)
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError):
        read_instances(path)


def test_write_rejects_ragged(tmp_path):
    with pytest.raises(FormatError):
        write_instances(tmp_path / "r.pgsi", [TrainingInstance(0, [1, 2]), TrainingInstance(0, [1])])


def test_byte_tokenizer():
    ids = encode_bytes("héllo")
    assert max(ids) < 256 and decode_bytes(ids + [SP.eot]) == "héllo"


def test_stats_and_synthetic():
    corpus = synthetic_corpus(3, 5, 24, seed=1)
    assert set(corpus) == {0, 1, 2}
    doc = corpus[1][0].tokens
    assert all((b - a) % 24 == 2 for a, b in zip(doc, doc[1:]))
    insts = [pad_or_truncate([1, 2], 4, SP, 1), pad_or_truncate([1, 2, 3, 4], 4, SP, 0)]
    stats = instance_stats(insts, SP.pad)
    assert stats == {"instances": 2, "tokens": 8, "per_domain": {0: 1, 1: 1}, "pad_tokens": 2}
