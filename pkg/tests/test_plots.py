from exudet.metrics import ConfusionMatrix, report
from exudet.plots import accuracy_curve, confusion_png
from exudet.trainer import EpochLog

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def fake_logs(n=5):
    rep = report(ConfusionMatrix(tp=4, fp=1, fn=1, tn=4))
    return [EpochLog(epoch=i + 1, train_loss=1.0 / (i + 1),
                     train_acc=0.5 + 0.1 * i, val=rep) for i in range(n)]


def test_accuracy_curve_writes_png(tmp_path):
    dest = tmp_path / "accuracy.png"
    accuracy_curve(fake_logs(), str(dest))
    assert dest.read_bytes()[:8] == PNG_MAGIC


def test_confusion_png_writes_png(tmp_path):
    dest = tmp_path / "confusion.png"
    confusion_png(ConfusionMatrix(tp=46, fp=16, fn=4, tn=34), str(dest))
    assert dest.read_bytes()[:8] == PNG_MAGIC


def test_confusion_png_handles_empty_cells(tmp_path):
    dest = tmp_path / "confusion.png"
    confusion_png(ConfusionMatrix(tp=0, fp=0, fn=0, tn=1), str(dest))
    assert dest.exists()
