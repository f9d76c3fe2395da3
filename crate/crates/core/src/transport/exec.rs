use std::future::Future;
use std::pin::pin;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll, Wake, Waker};
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

/// The future made no progress for the whole idle window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stalled(pub Duration);

struct ThreadWaker {
    thread: Thread,
    woken: AtomicBool,
}

impl Wake for ThreadWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.woken.store(true, Ordering::Release);
        self.thread.unpark();
    }
}

/// Drive `fut` to completion on the current thread.
///
/// With `idle_timeout`, gives up once the future has gone that long without
/// being woken. Every wake counts as progress, so long runs are fine as long
/// as messages keep flowing.
pub fn block_on<F: Future>(fut: F, idle_timeout: Option<Duration>) -> Result<F::Output, Stalled> {
    let mut fut = pin!(fut);
    let signal = Arc::new(ThreadWaker {
        thread: thread::current(),
        woken: AtomicBool::new(false),
    });
    let waker = Waker::from(signal.clone());
    let mut cx = Context::from_waker(&waker);
    loop {
        if let Poll::Ready(out) = fut.as_mut().poll(&mut cx) {
            return Ok(out);
        }
        let idle_since = Instant::now();
        while !signal.woken.swap(false, Ordering::Acquire) {
            match idle_timeout {
                None => thread::park(),
                Some(limit) => {
                    let idle = idle_since.elapsed();
                    if idle >= limit {
                        return Err(Stalled(limit));
                    }
                    thread::park_timeout(limit - idle);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::future::pending;

    #[test]
    fn ready_future() {
        assert_eq!(block_on(async { 5 }, None), Ok(5));
    }

    #[test]
    fn pending_future_stalls() {
        let limit = Duration::from_millis(20);
        assert_eq!(block_on(pending::<()>(), Some(limit)), Err(Stalled(limit)));
    }
}
