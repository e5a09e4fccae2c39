"""
fedvit.federation

Client and server roles of the federated protocol, FedSGD and FedAvg
aggregation, and an orchestrator running whole simulations.

Round r:
    server -> every client   GLOBAL_MODEL(r)
    client -> server         LOCAL_UPDATE_GRAD(r) or LOCAL_UPDATE_PARAMS(r)
    server -> every client   ROUND_COMPLETE(r) carrying the new global model

In encrypted mode the server only ever sees E_a·E_pat and E_b·E_pos and
applies its updates to them directly. It holds no key.
"""
import concurrent.futures
import dataclasses
import logging
import time
from typing import (
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .config import Mode, RunConfig, Strategy, TransportKind
from .crypto import (
    SecretKey,
    decrypt_model,
    encrypt_grad,
    encrypt_model,
)
from .data import Dataset, load_datasets, partition_random
from .errors import DomainMixingError, FedVitError
from .model import (
    GradientUpdate,
    ModelConfig,
    ModelParams,
    apply_sgd,
    batch_gradient,
    evaluate_accuracy,
    init_params,
    mean_records,
)
from .numerics import Rng
from .transport import (
    Endpoint,
    MessageType,
    RoundMessage,
    loopback_pair,
    socket_connect,
    socket_listen,
)

logger = logging.getLogger(__name__)

__all__ = [
    "Mode",
    "Strategy",
    "StaleRoundError",
    "ProtocolViolation",
    "AbortedRun",
    "ParamsUpdate",
    "ServerState",
    "LocalTraining",
    "ClientState",
    "RoundRecord",
    "SimulationResult",
    "initial_model",
    "client_local_step",
    "server_receive",
    "server_aggregate",
    "server_aggregate_fedsgd",
    "server_aggregate_fedavg",
    "ServerNode",
    "ClientNode",
    "run_simulation",
]


class StaleRoundError(FedVitError):
    def __init__(self, message: str, *, expected: int, got: int):
        super().__init__(f"{message} (expected round {expected}, got {got})")
        self.expected = expected
        self.got = got


class ProtocolViolation(FedVitError):
    """A peer sent something the protocol does not allow at this point."""


class AbortedRun(FedVitError):
    def __init__(
        self,
        message: str,
        *,
        last_round: int,
        records: Sequence["RoundRecord"] = (),
    ):
        """
        :param message: str Error message
        :param last_round: int Number of rounds completed before the abort
        :param records: the RoundRecords of those completed rounds
        """
        super().__init__(f"{message} (after {last_round} rounds)")
        self.last_round = last_round
        self.records = tuple(records)


@dataclasses.dataclass(frozen=True, eq=False)
class ParamsUpdate:
    """Locally trained parameters returned by a FedAvg client."""

    params: ModelParams
    round: int
    client_id: int
    loss: float = 0.0

    @property
    def encrypted(self) -> bool:
        return self.params.encrypted


Update = Union[GradientUpdate, ParamsUpdate]


@dataclasses.dataclass(frozen=True, eq=False)
class ServerState:
    """
    Everything the aggregator holds. No field can hold key material.
    """

    global_model: ModelParams
    strategy: Strategy
    lr: float
    expected_clients: int
    round: int = 0
    received: Tuple[Update, ...] = ()


@dataclasses.dataclass(frozen=True)
class LocalTraining:
    strategy: Strategy = Strategy.FEDSGD
    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 8
    seed: int = 0


@dataclasses.dataclass(eq=False)
class ClientState:
    """
    A client's view. local is always the plaintext model; key is None in
    plain mode.
    """

    client_id: int
    cfg: ModelConfig
    local: ModelParams
    data: Dataset
    training: LocalTraining = dataclasses.field(default_factory=LocalTraining)
    key: Optional[SecretKey] = None
    round: int = 0

    @property
    def mode(self) -> Mode:
        return Mode.PLAIN if self.key is None else Mode.ENCRYPTED


@dataclasses.dataclass(frozen=True)
class RoundRecord:
    round: int
    client_losses: Tuple[float, ...]
    accuracy: Optional[float]
    wall_time: float


@dataclasses.dataclass(frozen=True, eq=False)
class SimulationResult:
    records: Tuple[RoundRecord, ...]
    initial: ModelParams
    final: ModelParams
    final_global: ModelParams

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.records[-1].accuracy if self.records else None


def initial_model(
    cfg: ModelConfig, seed: int, key: Optional[SecretKey] = None
) -> ModelParams:
    """
    Initializer role: draw the starting model from the "model/init" stream
    and, in encrypted mode, encrypt it before the server ever sees it.
    """
    params = init_params(cfg, Rng(seed, "model/init"))
    return params if key is None else encrypt_model(params, key)


def _minibatches(client: ClientState, epoch: int) -> List[Sequence]:
    rng = Rng(client.training.seed, f"client/{client.client_id}")
    rng = rng.child(f"{client.round}/epoch/{epoch}")
    order = rng.generator.permutation(len(client.data))
    size = client.training.batch_size
    return [
        [client.data[int(i)] for i in order[start:start + size]]
        for start in range(0, len(order), size)
    ]


def client_local_step(
    client: ClientState, global_model: ModelParams, round_: int
) -> Update:
    """
    Decrypt the global model when needed, train on the local data and
    return the (re-encrypted) outbound update. FedSGD computes the mean
    gradient over the whole local partition without applying it; FedAvg runs
    local_epochs of mini-batch SGD.

    :param client: ClientState, updated in place
    :param global_model: ModelParams as received from the server
    :param round_: int Round announced by the server
    :return: GradientUpdate (FedSGD) or ParamsUpdate (FedAvg)
    """
    if round_ != client.round:
        raise StaleRoundError(
            f"Client {client.client_id} got a model for another round",
            expected=client.round,
            got=round_,
        )
    if global_model.encrypted != (client.key is not None):
        raise DomainMixingError(
            f"Client {client.client_id} runs in {client.mode.value} mode but "
            "received a model in the other domain"
        )
    if client.key is not None:
        global_model = decrypt_model(global_model, client.key)
    global_model.check_shapes(client.cfg)
    client.local = global_model
    training = client.training
    if training.strategy is Strategy.FEDSGD:
        grad = dataclasses.replace(
            batch_gradient(client.data.samples, global_model, client.cfg),
            round=round_,
            client_id=client.client_id,
        )
        update: Update = (
            grad if client.key is None else encrypt_grad(grad, client.key)
        )
        loss = grad.loss
    else:
        params = global_model
        losses = []
        for epoch in range(training.local_epochs):
            for batch in _minibatches(client, epoch):
                grad = batch_gradient(batch, params, client.cfg)
                params = apply_sgd(params, grad, training.lr)
                losses.append(grad.loss)
        loss = sum(losses) / len(losses)
        if client.key is not None:
            params = encrypt_model(params, client.key)
        update = ParamsUpdate(params, round_, client.client_id, loss)
    logger.debug(
        "Client %d round %d loss %.6f", client.client_id, round_, loss
    )
    client.round += 1
    return update


def server_receive(state: ServerState, update: Update) -> ServerState:
    """
    Buffer one client update for the current round.

    :raises StaleRoundError: update for another round
    :raises ProtocolViolation: duplicate client, wrong update kind or a
        full quorum already buffered
    :raises DomainMixingError: update and global model in different domains
    """
    _check_update(state, update)
    if any(u.client_id == update.client_id for u in state.received):
        raise ProtocolViolation(
            f"Client {update.client_id} sent two updates in round "
            f"{state.round}"
        )
    if len(state.received) >= state.expected_clients:
        raise ProtocolViolation(f"Round {state.round} already has a quorum")
    return dataclasses.replace(state, received=state.received + (update,))


def _check_update(state: ServerState, update: Update):
    expected = (
        GradientUpdate
        if state.strategy is Strategy.FEDSGD
        else ParamsUpdate
    )
    if not isinstance(update, expected):
        raise ProtocolViolation(
            f"{state.strategy.value} expects {expected.__name__} updates"
        )
    if update.round != state.round:
        raise StaleRoundError(
            f"Update from client {update.client_id} is stale",
            expected=state.round,
            got=update.round,
        )
    if update.encrypted != state.global_model.encrypted:
        raise DomainMixingError(
            f"Update from client {update.client_id} is in the other domain"
        )


def _quorum(state: ServerState, updates: Sequence[Update]) -> List[Update]:
    if len(updates) != state.expected_clients:
        raise ProtocolViolation(
            f"Round {state.round} has {len(updates)} of "
            f"{state.expected_clients} updates"
        )
    ids = [update.client_id for update in updates]
    if len(set(ids)) != len(ids):
        raise ProtocolViolation(f"Duplicate client ids in {sorted(ids)}")
    for update in updates:
        _check_update(state, update)
    return sorted(updates, key=lambda update: update.client_id)


def _next_round(state: ServerState, global_model: ModelParams) -> ServerState:
    return dataclasses.replace(
        state, global_model=global_model, round=state.round + 1, received=()
    )


def server_aggregate_fedsgd(
    state: ServerState, updates: Sequence[GradientUpdate]
) -> ServerState:
    """
    W ← W − τ·(1/M)·Σ g for every field, applied to whatever domain the
    global model lives in. Gradients are summed in client_id order.
    """
    ordered = _quorum(state, updates)
    mean = mean_records(ordered)  # type: ignore[type-var]
    return _next_round(
        state, apply_sgd(state.global_model, mean, state.lr)
    )


def server_aggregate_fedavg(
    state: ServerState, updates: Sequence[ParamsUpdate]
) -> ServerState:
    """
    Every field ← (1/M)·Σ client field, summed in client_id order.
    """
    ordered = _quorum(state, updates)
    average = mean_records([u.params for u in ordered])  # type: ignore
    return _next_round(state, average)


def server_aggregate(state: ServerState) -> ServerState:
    """
    Aggregate the buffered quorum with the configured strategy.
    """
    if state.strategy is Strategy.FEDSGD:
        return server_aggregate_fedsgd(
            state, state.received  # type: ignore[arg-type]
        )
    return server_aggregate_fedavg(
        state, state.received  # type: ignore[arg-type]
    )


def _update_message(update: Update) -> RoundMessage:
    if isinstance(update, GradientUpdate):
        return RoundMessage.for_gradient(update)
    return RoundMessage.for_params(
        MessageType.LOCAL_UPDATE_PARAMS,
        update.params,
        round_=update.round,
        sender_id=update.client_id,
        loss=update.loss,
    )


def message_update(msg: RoundMessage) -> Update:
    """
    :param msg: LOCAL_UPDATE_GRAD or LOCAL_UPDATE_PARAMS message
    :return: the update it carries
    """
    if msg.msg_type is MessageType.LOCAL_UPDATE_GRAD:
        return msg.gradient()
    if msg.msg_type is MessageType.LOCAL_UPDATE_PARAMS:
        return ParamsUpdate(msg.params(), msg.round, msg.sender_id, msg.loss)
    raise ProtocolViolation(
        f"Expected a local update, got {msg.msg_type.name}"
    )


RoundCallback = Callable[[ServerState, Tuple[float, ...]], None]
MessageCallback = Callable[[RoundMessage], None]


class ServerNode:
    """
    Drives rounds over one endpoint per client.

    Usage:
        server = ServerNode(state, endpoints, timeout=30)
        server.accept_registrations()
        state = server.run(rounds)
    """

    def __init__(
        self,
        state: ServerState,
        endpoints: Sequence[Endpoint],
        *,
        timeout: Optional[float] = None,
        on_round: Optional[RoundCallback] = None,
        on_update: Optional[MessageCallback] = None,
    ):
        """
        :param state: ServerState at round 0
        :param endpoints: one per expected client
        :param timeout: Optional float Seconds to wait for any one message
        :param on_round: called after every aggregation with the new state
            and the client losses in client_id order
        :param on_update: called with every update message as received
        """
        if len(endpoints) != state.expected_clients:
            raise ValueError("Need exactly one endpoint per expected client")
        self.state = state
        self.timeout = timeout
        self.on_round = on_round
        self.on_update = on_update
        self._pending = list(endpoints)
        self.clients: Dict[int, Endpoint] = {}

    def accept_registrations(self):
        for endpoint in self._pending:
            msg = endpoint.recv(self.timeout)
            if msg.msg_type is not MessageType.REGISTER:
                raise ProtocolViolation(
                    f"Expected REGISTER, got {msg.msg_type.name}"
                )
            if msg.sender_id in self.clients:
                raise ProtocolViolation(
                    f"Client id {msg.sender_id} registered twice"
                )
            self.clients[msg.sender_id] = endpoint
            logger.debug("Client %d registered", msg.sender_id)
        self._pending = []

    def _broadcast(self, msg: RoundMessage):
        for client_id in sorted(self.clients):
            self.clients[client_id].send(msg)

    def step(self) -> ServerState:
        """One full round."""
        state = self.state
        started = state.round
        self._broadcast(
            RoundMessage.for_params(
                MessageType.GLOBAL_MODEL, state.global_model, round_=started
            )
        )
        losses = {}
        for client_id in sorted(self.clients):
            msg = self.clients[client_id].recv(self.timeout)
            if msg.sender_id != client_id:
                raise ProtocolViolation(
                    f"Connection of client {client_id} sent as "
                    f"client {msg.sender_id}"
                )
            if self.on_update is not None:
                self.on_update(msg)
            update = message_update(msg)
            state = server_receive(state, update)
            losses[client_id] = update.loss
        state = server_aggregate(state)
        self.state = state
        logger.info(
            "Aggregated round %d from %d clients", started, len(losses)
        )
        self._broadcast(
            RoundMessage.for_params(
                MessageType.ROUND_COMPLETE, state.global_model, round_=started
            )
        )
        if self.on_round is not None:
            self.on_round(state, tuple(losses[i] for i in sorted(losses)))
        return state

    def run(self, rounds: int) -> ServerState:
        """
        :param rounds: int Rounds to run after registration
        :return: final ServerState
        """
        if self._pending:
            self.accept_registrations()
        for _ in range(rounds):
            self.step()
        self._broadcast(RoundMessage.shutdown(self.state.round))
        return self.state


class ClientNode:
    """
    Client side of the protocol over one endpoint. run returns the latest
    plaintext global model once the server shuts down.
    """

    def __init__(
        self,
        state: ClientState,
        endpoint: Endpoint,
        *,
        timeout: Optional[float] = None,
    ):
        self.state = state
        self.endpoint = endpoint
        self.timeout = timeout

    def run(self) -> ModelParams:
        state = self.state
        try:
            self.endpoint.send(RoundMessage.register(state.client_id))
            while True:
                msg = self.endpoint.recv(self.timeout)
                if msg.msg_type is MessageType.SHUTDOWN:
                    return state.local
                if msg.msg_type is MessageType.GLOBAL_MODEL:
                    update = client_local_step(state, msg.params(), msg.round)
                    self.endpoint.send(_update_message(update))
                elif msg.msg_type is MessageType.ROUND_COMPLETE:
                    params = msg.params()
                    if state.key is not None:
                        params = decrypt_model(params, state.key)
                    state.local = params
                else:
                    raise ProtocolViolation(
                        f"Client {state.client_id} cannot handle "
                        f"{msg.msg_type.name}"
                    )
        finally:
            self.endpoint.close()


def run_simulation(
    cfg: RunConfig,
    *,
    key: Optional[SecretKey] = None,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    on_update: Optional[MessageCallback] = None,
) -> SimulationResult:
    """
    Run cfg.rounds rounds with cfg.clients clients over the configured
    carrier. The server runs in the calling thread and every client in a
    worker thread. As the trusted operator, the orchestrator decrypts each
    new global model with key to evaluate it on the test set.

    :param cfg: RunConfig
    :param key: SecretKey, required in encrypted mode
    :param train: Optional Dataset, loaded from cfg.data when omitted
    :param test: Optional Dataset, loaded from cfg.data when omitted
    :param on_update: called with every client update message
    :return: SimulationResult with the decrypted final model
    :raises AbortedRun: a carrier or peer failed mid-run
    """
    encrypted = cfg.mode is Mode.ENCRYPTED
    if encrypted and key is None:
        raise ValueError("Encrypted mode needs the shared secret key")
    if not encrypted:
        key = None
    if train is None or test is None:
        loaded_train, loaded_test = load_datasets(cfg)
        train = loaded_train if train is None else train
        test = loaded_test if test is None else test
    train.check_config(cfg.model)
    test.check_config(cfg.model)
    per_client = cfg.data.per_client or len(train) // cfg.clients
    partition = partition_random(train, cfg.clients, per_client, cfg.seed)
    training = LocalTraining(
        strategy=cfg.strategy,
        lr=cfg.lr,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    initial_global = initial_model(cfg.model, cfg.seed, key)
    initial = init_params(cfg.model, Rng(cfg.seed, "model/init"))
    state = ServerState(
        global_model=initial_global,
        strategy=cfg.strategy,
        lr=cfg.lr,
        expected_clients=cfg.clients,
    )
    records: List[RoundRecord] = []
    clock = [time.perf_counter()]

    def plaintext(params: ModelParams) -> ModelParams:
        return params if key is None else decrypt_model(params, key)

    def on_round(new_state: ServerState, losses: Tuple[float, ...]):
        accuracy = evaluate_accuracy(
            test.samples, plaintext(new_state.global_model), cfg.model
        )
        now = time.perf_counter()
        records.append(
            RoundRecord(new_state.round, losses, accuracy, now - clock[0])
        )
        clock[0] = now
        logger.info(
            "Round %d accuracy %.2f%% mean loss %.6f",
            new_state.round,
            accuracy,
            sum(losses) / len(losses),
        )

    clients = [
        ClientState(
            client_id=i,
            cfg=cfg.model,
            local=initial,
            data=partition.samples(train, i),
            training=training,
            key=key,
        )
        for i in range(cfg.clients)
    ]
    timeout = cfg.transport.timeout
    logger.info(
        "Starting %s %s run: %d clients, %d rounds, %s transport",
        cfg.mode.value,
        cfg.strategy.value,
        cfg.clients,
        cfg.rounds,
        cfg.transport.kind.value,
    )
    server_endpoints: List[Endpoint] = []
    listener = None
    if cfg.transport.kind is TransportKind.LOOPBACK:
        pairs = [loopback_pair(f"client{i}") for i in range(cfg.clients)]
        server_endpoints = [server for _, server in pairs]
        client_endpoints: List[Optional[Endpoint]] = [
            client for client, _ in pairs
        ]
    else:
        listener = socket_listen(cfg.transport.address)
        client_endpoints = [None] * cfg.clients

    def run_client(index: int) -> ModelParams:
        endpoint = client_endpoints[index]
        if endpoint is None:
            endpoint = socket_connect(
                listener.address, timeout=timeout, attempts=5  # type: ignore
            )
        return ClientNode(clients[index], endpoint, timeout=timeout).run()

    server: Optional[ServerNode] = None
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=cfg.clients, thread_name_prefix="fedvit-client"
    ) as pool:
        futures = [pool.submit(run_client, i) for i in range(cfg.clients)]
        try:
            if listener is not None:
                server_endpoints = [
                    listener.accept(timeout) for _ in range(cfg.clients)
                ]
            server = ServerNode(
                state,
                server_endpoints,
                timeout=timeout,
                on_round=on_round,
                on_update=on_update,
            )
            server.run(cfg.rounds)
            for future in futures:
                future.result(timeout=timeout)
        except (
            FedVitError,
            OSError,
            concurrent.futures.TimeoutError,
        ) as exc:
            completed = len(records)
            for future in futures:
                if future.done() and future.exception() is not None:
                    logger.error("Client failed: %s", future.exception())
            logger.error("Run aborted after %d rounds: %s", completed, exc)
            raise AbortedRun(
                str(exc), last_round=completed, records=records
            ) from exc
        finally:
            for endpoint in server_endpoints:
                endpoint.close()
            if listener is not None:
                listener.close()
    final_global = server.state.global_model
    logger.info("Finished run after %d rounds", len(records))
    # zero rounds hand back the starting model bit for bit
    final = plaintext(final_global) if records else initial
    return SimulationResult(
        records=tuple(records),
        initial=initial,
        final=final,
        final_global=final_global,
    )
