import gzip
import io

import numpy as np
import pytest

from spatial_templates.corpus import Vocabulary
from spatial_templates.embed import (
    EmbeddingError,
    EmbeddingTable,
    available_tokens,
    load_pretrained,
    load_pretrained_many,
    lookup,
    make_one_hot,
    make_random_matched,
)


def vocab(*tokens, role="object"):
    return Vocabulary.build(role, tokens)


VEC_TEXT = "cat 0.1 0.2 0.3\ndog -1 0 1\nman 2 2 2\nhorse 0 0.5 1.5\n"


class TestLoadPretrained:
    def test_direct_parse(self):
        table = load_pretrained(io.StringIO(VEC_TEXT), 3, vocab("cat"))
        assert table.variant == "pretrained"
        np.testing.assert_array_equal(lookup(table, "cat"), [0.1, 0.2, 0.3])

    def test_exact_rows_for_vocab(self):
        table = load_pretrained(io.StringIO(VEC_TEXT), 3, vocab("man", "horse"))
        assert table.vectors.shape == (2, 3)

    def test_dimension_mismatch_names_line(self):
        with pytest.raises(EmbeddingError, match="line 2"):
            load_pretrained(io.StringIO("cat 1 2 3\ndog 1 2\n"), 3,
                            vocab("cat", "dog"))

    def test_missing_token_error(self):
        with pytest.raises(EmbeddingError, match="zebra"):
            load_pretrained(io.StringIO(VEC_TEXT), 3, vocab("cat", "zebra"))

    def test_duplicate_first_wins(self):
        text = "cat 1 1 1\ncat 9 9 9\n"
        table = load_pretrained(io.StringIO(text), 3, vocab("cat"))
        np.testing.assert_array_equal(lookup(table, "cat"), [1, 1, 1])

    def test_idempotent(self):
        t1 = load_pretrained(io.StringIO(VEC_TEXT), 3, vocab("cat", "dog"))
        t2 = load_pretrained(io.StringIO(VEC_TEXT), 3, vocab("cat", "dog"))
        np.testing.assert_array_equal(t1.vectors, t2.vectors)

    def test_gzip_input(self, tmp_path):
        path = tmp_path / "vecs.txt.gz"
        with gzip.open(path, "wt") as fh:
            fh.write(VEC_TEXT)
        table = load_pretrained(path, 3, vocab("dog"))
        np.testing.assert_array_equal(lookup(table, "dog"), [-1, 0, 1])

    def test_single_pass_many(self):
        subj, obj = vocab("man", role="subject"), vocab("cat", "dog")
        t_s, t_o = load_pretrained_many(io.StringIO(VEC_TEXT), 3, [subj, obj])
        assert t_s.vocab.role == "subject" and t_o.vectors.shape == (2, 3)

    def test_available_tokens(self):
        assert available_tokens(io.StringIO(VEC_TEXT)) == {"cat", "dog", "man", "horse"}


class TestOneHot:
    def test_basis_vectors(self):
        table = make_one_hot(vocab("a", "b", "c"))
        np.testing.assert_array_equal(lookup(table, "b"), [0, 1, 0])

    def test_rows_sum_to_one(self):
        table = make_one_hot(vocab("a", "b", "c"))
        assert table.vectors.sum(axis=1).tolist() == [1, 1, 1]

    def test_dim_equals_vocab_size(self):
        table = make_one_hot(vocab("a", "b", "c"))
        assert table.dim == 3

    def test_orthonormality_property(self):
        table = make_one_hot(vocab(*"abcdefg"))
        for t1 in table.vocab.tokens:
            for t2 in table.vocab.tokens:
                dot = float(lookup(table, t1) @ lookup(table, t2))
                assert dot == (1.0 if t1 == t2 else 0.0)


class TestRandomMatched:
    def reference(self):
        rng = np.random.default_rng(0)
        v = vocab(*(f"t{i}" for i in range(40)))
        return EmbeddingTable(vocab=v, vectors=rng.normal(1.5, 0.7, (40, 5)),
                              variant="pretrained")

    def test_degenerate_sigma(self):
        v = vocab("a", "b")
        ref = EmbeddingTable(vocab=v, vectors=np.full((2, 3), 4.2),
                             variant="pretrained")
        table = make_random_matched(ref, vocab("x", "y", "z"), seed=1)
        assert np.all(table.vectors == 4.2)

    def test_monte_carlo_mean_bound(self):
        ref = self.reference()
        big_vocab = vocab(*(f"w{i}" for i in range(10000)))
        table = make_random_matched(ref, big_vocab, seed=7)
        mu = ref.vectors.mean(axis=0)
        sigma = ref.vectors.std(axis=0, ddof=1)
        bound = 4.0 * sigma / np.sqrt(10000)
        assert np.all(np.abs(table.vectors.mean(axis=0) - mu) < bound)

    def test_seed_determinism(self):
        ref = self.reference()
        a = make_random_matched(ref, vocab("x", "y"), seed=3)
        b = make_random_matched(ref, vocab("x", "y"), seed=3)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_dimensionality_preserved(self):
        table = make_random_matched(self.reference(), vocab("x"), seed=0)
        assert table.dim == 5 and table.variant == "random_matched"

    def test_reference_too_small(self):
        ref = EmbeddingTable(vocab=vocab("a"), vectors=np.ones((1, 3)),
                             variant="pretrained")
        with pytest.raises(EmbeddingError):
            make_random_matched(ref, vocab("x"), seed=0)


class TestLookup:
    def test_returns_copy(self):
        table = make_one_hot(vocab("a", "b"))
        row = lookup(table, "a")
        row[0] = 99.0
        assert table.vectors[0, 0] == 1.0

    def test_unknown_token(self):
        table = make_one_hot(vocab("a"))
        with pytest.raises(EmbeddingError):
            lookup(table, "zzz")


class TestTableInvariants:
    def test_trainable_rejected(self):
        with pytest.raises(EmbeddingError):
            EmbeddingTable(vocab=vocab("a"), vectors=np.ones((1, 2)),
                           variant="pretrained", trainable=True)

    def test_row_count_checked(self):
        with pytest.raises(EmbeddingError):
            EmbeddingTable(vocab=vocab("a", "b"), vectors=np.ones((1, 2)),
                           variant="pretrained")

    def test_json_roundtrip(self):
        table = make_one_hot(vocab("a", "b", role="relation"))
        back = EmbeddingTable.from_json_dict(table.to_json_dict())
        assert back.vocab.tokens == table.vocab.tokens
        np.testing.assert_array_equal(back.vectors, table.vectors)
