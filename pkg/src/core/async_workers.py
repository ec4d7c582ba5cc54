# src/core/async_workers.py
import logging
import threading
import time
from queue import Queue, Empty, Full
from typing import Any, Callable, Dict, Iterable, Iterator, Optional

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_SIZE = 64
RATE_LOG_INTERVAL_S = 10.0

_SENTINEL = object()


class _TaskFailure:
    """Bọc exception từ worker để luồng chính raise lại đúng chỗ."""

    def __init__(self, error: BaseException):
        self.error = error


class TaskWorkerThread(threading.Thread):
    """
    Luồng worker: lấy (index, item) từ task queue, chạy fn(item), đẩy (index, kết quả) vào result queue.
    """

    def __init__(self, fn: Callable[[Any], Any], task_queue: Queue, result_queue: Queue,
                 running_flag: threading.Event, name: str):
        super().__init__(daemon=True, name=name)
        self.fn = fn
        self.task_queue = task_queue
        self.result_queue = result_queue
        self.running_flag = running_flag
        self.processed_count = 0
        self.last_log_time = time.time()

    def run(self):
        logger.debug(f"{self.name} đã bắt đầu.")
        while self.running_flag.is_set():
            try:
                task = self.task_queue.get(timeout=0.5)
            except Empty:
                continue
            if task is _SENTINEL:
                self.task_queue.task_done()
                break
            index, item = task
            try:
                result = self.fn(item)
            except Exception as e:
                logger.error(f"{self.name}: lỗi khi xử lý task #{index}: {e}")
                result = _TaskFailure(e)
            self.result_queue.put((index, result))
            self.task_queue.task_done()
            self.processed_count += 1

            current_time = time.time()
            if current_time - self.last_log_time >= RATE_LOG_INTERVAL_S:
                rate = self.processed_count / (current_time - self.last_log_time)
                logger.info(f"{self.name}: {rate:.2f} task/s. Queue size: {self.task_queue.qsize()}")
                self.processed_count = 0
                self.last_log_time = current_time
        logger.debug(f"{self.name} đã dừng.")


def _put_while_running(target: Queue, item: Any, running_flag: threading.Event) -> bool:
    while running_flag.is_set():
        try:
            target.put(item, timeout=0.5)
            return True
        except Full:
            continue
    return False


def ordered_map(fn: Callable[[Any], Any], items: Iterable[Any], workers: int = 1,
                queue_size: int = DEFAULT_QUEUE_SIZE, name: str = "Worker") -> Iterator[Any]:
    """
    Áp dụng fn lên từng item, có thể song song trên nhiều thread, và trả kết quả theo đúng thứ tự đầu vào.

    Thứ tự kết quả không phụ thuộc số worker nên tổng hợp (aggregate) luôn tất định.

    Args:
        fn: Hàm xử lý một item. Phải thread-safe.
        items: Các item đầu vào.
        workers: Số thread; <= 1 chạy tuần tự trên luồng hiện tại.
        queue_size: Kích thước hàng đợi task (bounded).
        name: Tiền tố tên thread để log.

    Raises:
        Exception đầu tiên (theo thứ tự item) mà fn raise.
    """
    if workers <= 1:
        for item in items:
            yield fn(item)
        return

    task_queue: Queue = Queue(maxsize=queue_size)
    result_queue: Queue = Queue()
    running_flag = threading.Event()
    running_flag.set()

    threads = [
        TaskWorkerThread(fn, task_queue, result_queue, running_flag, name=f"{name}-{i}")
        for i in range(workers)
    ]
    for t in threads:
        t.start()

    submitted = 0

    def _feed():
        nonlocal submitted
        for index, item in enumerate(items):
            if not _put_while_running(task_queue, (index, item), running_flag):
                return
            submitted += 1
        for _ in threads:
            _put_while_running(task_queue, _SENTINEL, running_flag)

    feeder = threading.Thread(target=_feed, daemon=True, name=f"{name}-feeder")
    feeder.start()

    pending: Dict[int, Any] = {}
    next_index = 0
    try:
        while feeder.is_alive() or next_index < submitted:
            try:
                index, result = result_queue.get(timeout=0.5)
            except Empty:
                continue
            pending[index] = result
            while next_index in pending:
                value = pending.pop(next_index)
                next_index += 1
                if isinstance(value, _TaskFailure):
                    raise value.error
                yield value
    finally:
        running_flag.clear()
        for t in threads:
            t.join(timeout=3)
            if t.is_alive():
                logger.warning(f"{t.name} chưa dừng sau 3 giây")


class PrefetchThread(threading.Thread):
    """
    Luồng chuẩn bị trước các phần tử của một iterator (ví dụ batch training) vào hàng đợi bounded.
    """

    def __init__(self, source: Iterable[Any], out_queue: Queue, running_flag: threading.Event):
        super().__init__(daemon=True, name="PrefetchThread")
        self.source = source
        self.out_queue = out_queue
        self.running_flag = running_flag
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            for item in self.source:
                if not _put_while_running(self.out_queue, item, self.running_flag):
                    return
        except Exception as e:
            logger.error(f"Lỗi trong luồng prefetch: {e}", exc_info=True)
            self.error = e
        finally:
            self.out_queue.put(_SENTINEL)


def prefetch(source: Iterable[Any], maxsize: int = 4) -> Iterator[Any]:
    """Duyệt source qua một PrefetchThread; maxsize <= 0 thì duyệt trực tiếp."""
    if maxsize <= 0:
        yield from source
        return
    out_queue: Queue = Queue(maxsize=maxsize)
    running_flag = threading.Event()
    running_flag.set()
    thread = PrefetchThread(source, out_queue, running_flag)
    thread.start()
    try:
        while True:
            item = out_queue.get()
            if item is _SENTINEL:
                break
            yield item
        if thread.error is not None:
            raise thread.error
    finally:
        running_flag.clear()
        # Giải phóng chỗ trong queue để thread không bị kẹt ở put()
        while thread.is_alive():
            try:
                out_queue.get_nowait()
            except Empty:
                pass
            thread.join(timeout=0.1)
