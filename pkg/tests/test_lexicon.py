import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mindprint.errors import DataError
from mindprint.lexicon import (
    FeatureVector,
    Lexicon,
    LexiconVectorizer,
    LexiconParseError,
    _featurize_python,
    aggregate_embeddings,
    featurize_batch,
    featurize_comment,
    load_demo_lexicon,
    load_lexicon,
    read_embeddings,
    tokenize,
    write_embeddings,
    UserEmbedding,
)

from oracles import scan_featurize, scan_tokens


def write_dic(tmp_path, text, name="t.dic"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


FIXTURE = "%\n3\tcogproc\n7\tbio\n9\tsocial\n%\nthink\t3\nhungr*\t7\nfriend*\t9\nknow\t3\nthink\t9\n"


def test_load_fixture_matches_hand_built(tmp_path):
    lex = load_lexicon(write_dic(tmp_path, FIXTURE))
    expected = Lexicon(
        ["cogproc", "bio", "social"],
        {"think": frozenset({0, 2}), "know": frozenset({0})},
        {"hungr": frozenset({1}), "friend": frozenset({2})},
    )
    assert lex == expected


def test_prefix_entry_matches_extensions(tmp_path):
    lex = load_lexicon(write_dic(tmp_path, FIXTURE))
    assert lex.lookup("hungry") == (1,)
    assert lex.lookup("hungrier") == (1,)
    assert lex.lookup("hunger") == ()


def test_unknown_category_reports_line(tmp_path):
    path = write_dic(tmp_path, "%\n1 a\n%\nok\t1\nbad\t4\n")
    with pytest.raises(LexiconParseError) as err:
        load_lexicon(path)
    assert err.value.lineno == 5


def test_header_errors(tmp_path):
    with pytest.raises(LexiconParseError):
        load_lexicon(write_dic(tmp_path, "1 a\n%\n"))
    with pytest.raises(LexiconParseError):
        load_lexicon(write_dic(tmp_path, "%\n1 a\n1 b\n%\n"))


def test_demo_dictionary_shape():
    lex = load_demo_lexicon()
    assert lex.n_categories == 22
    assert "posemo" in lex.categories


@pytest.mark.parametrize(
    "text, tokens",
    [
        ("I think, therefore I am.", ["i", "think", "therefore", "i", "am"]),
        ("", []),
        ("Don't trust THEM!! http://x.co", ["don't", "trust", "them"]),
        ("route 66 and 4ever", ["route", "and", "ever"]),
        ("see www.example.org/x now", ["see", "now"]),
        ("'quoted' rock'n'roll", ["quoted", "rock'n'roll"]),
    ],
)
def test_tokenize_examples(text, tokens):
    assert tokenize(text) == tokens


def test_featurize_worked_example():
    lex = Lexicon(["cogproc"], {"think": frozenset({0}), "know": frozenset({0})})
    fv = featurize_comment(lex, "we think we know")
    assert fv.token_count == 4
    assert fv.values.tolist() == [50.0]


def test_no_hits_and_empty_text():
    lex = load_demo_lexicon()
    fv = featurize_comment(lex, "zzqx blorp")
    assert fv.token_count == 2 and not fv.values.any()
    fv = featurize_comment(lex, "!!! 123")
    assert fv.token_count == 0 and not fv.values.any()


def test_multi_category_sum_not_normalized():
    lex = Lexicon(["a", "b"], {"x": frozenset({0, 1})})
    fv = featurize_comment(lex, "x x")
    assert fv.values.sum() == 200.0


def test_batch_is_order_and_chunk_independent():
    lex = load_demo_lexicon()
    rng = np.random.default_rng(0)
    words = sorted(lex.exact) + ["filler", "words", "élan", "naïve"]
    texts = [" ".join(rng.choice(words, rng.integers(0, 12))) for _ in range(300)]
    base, nt = featurize_batch(lex, texts)
    chunked, nt2 = featurize_batch(lex, texts, n_jobs=3, chunk_size=17)
    assert np.array_equal(base, chunked) and np.array_equal(nt, nt2)
    perm = rng.permutation(len(texts))
    shuffled, _ = featurize_batch(lex, [texts[i] for i in perm])
    assert np.array_equal(shuffled, base[perm])


ascii_text = st.lists(
    st.sampled_from(list("abcdehtpswxyz") + list("ABZ '.,:/-_1\t\n") + ["http://", "www.", "'s"]),
    max_size=40,
).map("".join)


@st.composite
def tiny_lexicon(draw):
    letters = st.text(alphabet="abcdehstwx'", min_size=1, max_size=4).filter(lambda w: w[0] != "'")
    d = draw(st.integers(1, 4))
    cats = st.frozensets(st.integers(0, d - 1), min_size=1, max_size=d)
    exact = draw(st.dictionaries(letters, cats, max_size=6))
    prefix = draw(st.dictionaries(letters, cats, max_size=4))
    return Lexicon([f"c{k}" for k in range(d)], exact, prefix)


@settings(max_examples=300, deadline=None)
@given(tiny_lexicon(), st.lists(ascii_text, min_size=1, max_size=5))
def test_kernel_matches_python_path(lex, texts):
    counts, ntok = np.zeros((len(texts), lex.n_categories), dtype=np.int64), np.zeros(len(texts), dtype=np.int64)
    _featurize_python(lex, texts, counts, ntok, range(len(texts)))
    values, nt = featurize_batch(lex, texts)
    assert np.array_equal(nt, ntok)
    expected = np.where(ntok[:, None] > 0, 100.0 * counts / np.maximum(ntok, 1)[:, None], 0.0)
    assert np.array_equal(values, expected)


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=50))
def test_tokenizer_matches_scan(text):
    assert tokenize(text) == scan_tokens(text)


@settings(max_examples=200, deadline=None)
@given(tiny_lexicon(), ascii_text)
def test_values_bounded(lex, text):
    fv = featurize_comment(lex, text)
    assert np.all(fv.values >= 0) and np.all(fv.values <= 100)
    ref, n = scan_featurize(lex, text)
    assert n == fv.token_count and np.array_equal(ref, fv.values)


def test_aggregate_examples():
    v = np.array([1.0, 2.0, 3.0])
    w = np.array([3.0, 0.0, 1.0])
    one = aggregate_embeddings([FeatureVector(v, 3)])
    assert np.array_equal(one.vector, v) and one.n_comments == 1
    two = aggregate_embeddings([v, w])
    assert np.array_equal(two.vector, (v + w) / 2)


def test_aggregate_seven_and_permutation_invariance():
    rng = np.random.default_rng(3)
    rows = rng.uniform(0, 100, size=(7, 5))
    emb = aggregate_embeddings(list(rows), "u", "c", "pre")
    expected = np.array([sum(col) / 7 for col in rows.T])
    assert np.allclose(emb.vector, expected, rtol=1e-12, atol=0)
    shuffled = aggregate_embeddings(list(rows[rng.permutation(7)]))
    assert np.array_equal(shuffled.vector, emb.vector)
    assert emb.n_comments == 7 and emb.scope_tag == "pre"


def test_aggregate_empty_errors():
    with pytest.raises(DataError, match="no comments in scope"):
        aggregate_embeddings([])


def test_embedding_store_roundtrip(tmp_path):
    embs = [
        UserEmbedding("a", "news", "all", np.array([0.1, 1 / 3]), 4),
        UserEmbedding("b", "news", "pre", np.array([2.0, 0.0]), 1),
    ]
    path = tmp_path / "emb.csv"
    write_embeddings(embs, path, ["x", "y"])
    assert path.read_text().splitlines()[0] == "author,community,scope_tag,n_comments,f_1,f_2"
    back, cats = read_embeddings(path)
    assert cats == ["x", "y"]
    assert [(e.author, e.scope_tag, e.n_comments) for e in back] == [("a", "all", 4), ("b", "pre", 1)]
    assert np.array_equal(back[0].vector, embs[0].vector)


def test_vectorizer_estimator_api():
    vec = LexiconVectorizer()
    X = vec.fit_transform(["we think we know", "awful bad day"])
    assert X.shape == (2, 22)
    assert list(vec.get_feature_names_out())[:2] == ["i", "we"]
    assert vec.token_counts_.tolist() == [4, 3]
    with pytest.raises(TypeError):
        vec.transform("one string")
