"""Recipe records, tokenization, segmentation, vocabulary, batching and the event lexicon."""
from .lexicon import (
    STATE_CHANGES,
    EventLexicon,
    LexiconEntry,
    LexiconError,
    load_lexicon,
    sample_lexicon,
    save_lexicon,
    stem_candidates,
)
from .records import (
    DEFAULT_DELIMITERS,
    RecipeRecord,
    SegmentedDoc,
    read_corpus,
    split_sentences,
    tokenize,
    write_corpus,
)
from .synthetic import Grammar, Stage, default_grammar, generate_synthetic_corpus, split_corpus
from .vocab import Batch, EncodedRecipe, Vocab, build_vocab, collate, make_batches

__all__ = [
    "DEFAULT_DELIMITERS", "STATE_CHANGES", "Batch", "EncodedRecipe", "EventLexicon", "Grammar",
    "LexiconEntry", "LexiconError", "RecipeRecord", "SegmentedDoc", "Stage", "Vocab", "build_vocab",
    "collate", "default_grammar", "generate_synthetic_corpus", "load_lexicon", "make_batches",
    "read_corpus", "sample_lexicon", "save_lexicon", "split_corpus", "split_sentences",
    "stem_candidates", "tokenize", "write_corpus",
]
