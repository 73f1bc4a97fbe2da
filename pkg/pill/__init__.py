"""
Modality adapter experts and modality-gated attention on a frozen decoder.

Modules:
    tensor_core     numpy arrays with reverse-mode differentiation
    model           interleaved sequences, the frozen decoder and its injections
    synthetic_data  vocabulary, synthetic VQA samples and the text corpus
    training        base pre-training and the two injection stages
    checkpoint      binary parameter snapshots
"""
