import numpy as np
import pytest
import torch

from maskground.text import (CategoryQueries, EmbeddingProvider, OovError,
                             collect_caption_vocabulary, drop_words, embed_words,
                             expand_categories, extract_words, load_query_maps,
                             phrase_rows)

CAPTION = "a red circle and a blue square"


def test_extract_noun_adj():
    assert extract_words(CAPTION, "noun_adj") == ["red", "circle", "blue", "square"]


def test_extract_all_keeps_everything():
    assert extract_words(CAPTION, "all") == CAPTION.split()
    assert len(extract_words(CAPTION, "all")) == 7


def test_extract_stop_words_only():
    assert extract_words("a the and on", "noun_adj") == []


def test_extract_mode_nesting():
    caption = "a red circle sits on the grass"
    bags = {m: extract_words(caption, m) for m in ("noun_adj", "noun_adj_verb", "all")}
    def multiset(ws):
        from collections import Counter
        return Counter(ws)
    assert multiset(bags["noun_adj"]) <= multiset(bags["noun_adj_verb"])
    assert multiset(bags["noun_adj_verb"]) <= multiset(bags["all"])


def test_extract_validates():
    with pytest.raises(ValueError):
        extract_words("", "all")
    with pytest.raises(ValueError):
        extract_words("x", "nouns_only")


def test_drop_words_identity_and_forced_single():
    rng = np.random.default_rng(0)
    words = ["red", "circle", "blue", "square"]
    assert drop_words(words, 1.0, rng) == words
    only = drop_words(words, 0.0, rng)
    assert len(only) == 1 and only[0] in words


def test_drop_words_never_empty_and_submultiset():
    rng = np.random.default_rng(1)
    words = ["red", "red", "circle"]
    for _ in range(200):
        kept = drop_words(words, 0.3, rng)
        assert kept
        from collections import Counter
        assert Counter(kept) <= Counter(words)


def test_drop_words_keep_frequency():
    rng = np.random.default_rng(2)
    words = ["a", "b", "c", "d"]
    trials = 100_000
    counts = {w: 0 for w in words}
    conditioned = 0
    for _ in range(trials):
        raw = [w for w in words if rng.random() < 0.5]
        if raw:  # measure the pre-correction keep rate conditionally
            conditioned += 1
            for w in raw:
                counts[w] += 1
    for w in words:
        assert abs(counts[w] / trials - 0.5) < 0.01


def test_embedding_provider_basics():
    provider = EmbeddingProvider(["red", "circle"], 8, oov_policy="strict")
    rows = embed_words(["red", "red", "circle"], provider)
    assert rows.shape == (3, 8)
    assert torch.equal(rows[0], rows[1])
    assert (provider.table.norm(dim=1) > 0).all()
    with pytest.raises(OovError):
        embed_words(["turquoise"], provider)


def test_embedding_provider_unk_policy():
    provider = EmbeddingProvider(["red"], 8, oov_policy="unk")
    unk = embed_words(["nope"], provider)
    assert torch.equal(unk[0], provider.table[0])


def test_embedding_provider_same_word_same_vector():
    provider = EmbeddingProvider(["red", "circle"], 4)
    before = embed_words(["circle"], provider).detach().clone()
    with torch.no_grad():  # unrelated training step: touch a different row
        provider.table[provider.lookup("red")] += 1.0
    after = embed_words(["circle"], provider)
    assert torch.equal(before, after)


def test_expand_categories_fixture_lists():
    synonyms, prompts = load_query_maps()
    queries = expand_categories(["person", "grass", "widget"], synonyms, prompts)
    person = dict(queries.categories)["person"]
    for expected in ("child", "girl", "boy"):
        assert expected in person
    grass = dict(queries.categories)["grass"]
    assert "lawn" in grass and "turf" in grass
    assert dict(queries.categories)["widget"] == ("widget",)
    assert queries.names == ["person", "grass", "widget"]


def test_expand_categories_prompt_rewrite():
    synonyms, prompts = load_query_maps()
    queries = expand_categories(["glass"], synonyms, prompts)
    assert dict(queries.categories)["glass"] == ("drinking glass",)


def test_expand_categories_validation():
    with pytest.raises(ValueError):
        expand_categories([])
    with pytest.raises(ValueError):
        expand_categories(["x"], {"x": []})


def test_category_queries_validation():
    with pytest.raises(ValueError):
        CategoryQueries(())
    with pytest.raises(ValueError):
        CategoryQueries((("cat", ()),))


def test_phrase_rows_word_vs_mean():
    provider = EmbeddingProvider(["red", "circle", "background"], 8)
    queries = CategoryQueries((("red circle", ("red circle",)),
                               ("background", ("background",))))
    rows_w, cats_w, phrases_w = phrase_rows(queries, provider, "word")
    assert rows_w.shape == (3, 8)  # red, circle, background
    assert cats_w == [0, 0, 1]
    rows_m, cats_m, phrases_m = phrase_rows(queries, provider, "mean")
    assert rows_m.shape == (2, 8)
    expected = embed_words(["red", "circle"], provider).mean(dim=0)
    assert torch.allclose(rows_m[0], expected)
    assert [p for _, p in phrases_m] == ["red circle", "background"]


def test_collect_caption_vocabulary():
    vocab = collect_caption_vocabulary(["a zork on a background"])
    assert "zork" in vocab and "background" in vocab
    assert vocab == sorted(vocab)
