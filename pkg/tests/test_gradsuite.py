from bmqa.gradsuite import CASES, TOLERANCE, run_suite


def test_suite_covers_ops_and_composites():
    for name in ("matmul", "softmax", "layer_norm", "image_encoder", "qsd_encoder", "align_block", "fusion",
                 "contrastive_paper_sum", "contrastive_mean_nll", "caption_nll"):
        assert name in CASES


def test_suite_passes_on_a_few_instances():
    result = run_suite(instances=2, seed=3)
    assert result.passed, result.to_text()
    assert max(result.worst.values()) < TOLERANCE
    assert set(result.worst) == set(CASES)


def test_subset_and_determinism():
    a = run_suite(instances=2, seed=1, cases=["matmul", "fusion"])
    b = run_suite(instances=2, seed=1, cases=["matmul", "fusion"])
    assert a.worst == b.worst and list(a.worst) == ["matmul", "fusion"]
