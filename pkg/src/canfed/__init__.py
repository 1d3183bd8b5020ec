"""Federated LSTM-autoencoder intrusion detection for CAN traffic.

Subpackages and modules:

``candata``       frames, logs, synthetic traffic, windows, partitions
``segmentation``  signal boundaries and classes from bit-flip rates
``attacks``       replay, fuzzing, seamless-change and drop attacks
``autoencoder``   numpy LSTM autoencoder, training and thresholds
``federation``    FedAvg/FedProx rounds over publish/subscribe
``pubsub``        QoS-2 broker, TCP client, deterministic loopback
``metrics``       detection and communication-overhead reports
``experiment``    end-to-end pipeline behind the ``canfed`` command
"""

__version__ = "0.1.0"
