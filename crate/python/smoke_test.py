"""Quick end-to-end check of the omniseq extension module."""

import math
import tempfile
from pathlib import Path

import omniseq


def main():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = omniseq.generate(str(root / "data"), users=30, items=300, rho=0.8, seed=4)
        assert cfg["users"] == 30

        stats = omniseq.ingest(str(root / "data"), str(root / "features"))
        assert stats["records"] > 0

        seqs = omniseq.load_sequences(str(root / "features"))
        assert len(seqs) == 30
        assert all(s.online_count() >= 1 for s in seqs)

        model, log = omniseq.train(str(root / "data"), variant="attn-enc", epochs=2, batch_size=4, d=8, seed=2)
        assert len(log) >= 1 and model.variant == "attn-enc"

        scores = model.score(seqs[0], [1, 2, 3])
        assert len(scores) == 3 and all(math.isfinite(x) for x in scores)
        weights = model.set_attention([5, 9, 12])
        assert abs(sum(weights) - 1.0) < 1e-9

        ckpt = root / "attn.ckpt"
        model.save(str(ckpt))
        report = omniseq.evaluate(omniseq.Model.load(str(ckpt)), str(root / "features"), seed=1)
        assert 0.0 <= report["ndcg10"] <= report["hit10"] <= 1.0

        assert omniseq.rank_target([0.5, 0.5, 0.1], 0) == 2
        assert omniseq.hit_at_k(10) == 1.0 and omniseq.hit_at_k(11) == 0.0
        assert abs(omniseq.ndcg_at_k(1) - 1.0) < 1e-12

        try:
            omniseq.generate(str(root / "bad"), rho=1.5)
        except ValueError:
            pass
        else:
            raise AssertionError("rho=1.5 accepted")

    print(f"omniseq {omniseq.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
