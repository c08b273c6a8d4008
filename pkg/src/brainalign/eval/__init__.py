from .captions import (UNAVAILABLE, ScorerError, ScorerRegistry, bleu_k, caption_report, corpus_bleu,
                       register_scorer, rouge_l, rouge_l_multi, tokenize)
from .grounding import GroundingReport, grounding_accuracy, iou
from .retrieval import (RetrievalReport, retrieval_backward, retrieval_exemplar, retrieval_forward,
                        retrieval_report)
from .taxonomy import DEFAULT_TAXONOMY, category_sizes, salience_category
