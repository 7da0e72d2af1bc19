from .dataset import (
    PreprocessStats,
    ProcessedDataset,
    cache_load,
    cache_save,
    load_dataset,
    preprocess,
    preprocess_fingerprint,
    source_files,
)
from .mind import (
    ImpressionLog,
    NewsArticle,
    ParseReport,
    parse_behaviors_tsv,
    parse_news_tsv,
    parse_time,
    write_behaviors_tsv,
    write_news_tsv,
)
from .sampling import (
    Batch,
    Collator,
    TrainingSample,
    build_samples,
    history_rows,
    make_batches,
    sample_negatives,
    split_validation,
)
from .synthetic import SyntheticSpec, generate, generate_synthetic
from .text import OOV, PAD, Vocabulary, build_vocab, build_vocab_and_embeddings, load_embedding_file, tokenize
