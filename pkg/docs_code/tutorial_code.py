# MIT License
#
# Copyright (c) 2025 David C Ellis
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in all
# copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""
Federated run on synthetic beats, three clients with skewed shares.
"""
from ducktools.fedgaf.config import ClientSpec, FederationConfig
from ducktools.fedgaf.evalkit import emit_report
from ducktools.fedgaf.fedcore import simulate
from ducktools.fedgaf.gaf import EncodeConfig, encode_manifest, images_to_arrays
from ducktools.fedgaf.ingest import partition_clients, split_train_test, synth_dataset
from ducktools.fedgaf.neuralkit import save_checkpoint


def to_arrays(manifest):
    return images_to_arrays(encode_manifest(manifest, EncodeConfig()))


def main():
    ids = ["pc", "laptop", "pi"]
    shares = [0.5, 0.49, 0.01]

    manifest = synth_dataset(per_class=200, seed=0)
    train, test = split_train_test(manifest, 0.5, seed=0)
    shards = partition_clients(train, shares, seed=0, shard_ids=ids)

    config = FederationConfig(
        rounds=10,
        local_epochs=10,
        clients=tuple(ClientSpec(i, s) for i, s in zip(ids, shares)),
    )
    params, report = simulate(config, [to_arrays(s) for s in shards], test=to_arrays(test))

    print(f"Test accuracy: {report.test_accuracy:.4f}")
    print(f"Per class: {report.per_class_accuracy}")
    print(f"Bytes sent: {report.bytes_sent}, received: {report.bytes_received}")

    emit_report(report, "run")
    save_checkpoint("run/model_final.bin", config.model, params)


if __name__ == "__main__":
    main()
