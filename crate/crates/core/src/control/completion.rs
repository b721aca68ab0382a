//! Single-shot completion slots shared between the coordinator and an
//! inferlet's event loop.

use std::cell::RefCell;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

struct Slot<T> {
    value: Option<T>,
    waker: Option<Waker>,
    resolved: bool,
}

/// Future side of a completion.
pub struct Completion<T> {
    slot: Rc<RefCell<Slot<T>>>,
}

/// Producer side of a completion. Resolving twice is ignored.
pub struct Resolver<T> {
    slot: Rc<RefCell<Slot<T>>>,
}

pub fn completion<T>() -> (Resolver<T>, Completion<T>) {
    let slot = Rc::new(RefCell::new(Slot { value: None, waker: None, resolved: false }));
    (Resolver { slot: slot.clone() }, Completion { slot })
}

impl<T> Completion<T> {
    pub fn ready(value: T) -> Self {
        let (r, c) = completion();
        r.resolve(value);
        c
    }

    pub fn is_ready(&self) -> bool {
        self.slot.borrow().value.is_some()
    }

    /// Takes the value if it has arrived.
    pub fn try_take(&mut self) -> Option<T> {
        self.slot.borrow_mut().value.take()
    }

    pub fn map<U, F: FnOnce(T) -> U>(self, f: F) -> Map<T, F> {
        Map { inner: self, f: Some(f) }
    }
}

impl<T> Resolver<T> {
    pub fn resolve(self, value: T) {
        let waker = {
            let mut s = self.slot.borrow_mut();
            if s.resolved {
                return;
            }
            s.resolved = true;
            s.value = Some(value);
            s.waker.take()
        };
        if let Some(w) = waker {
            w.wake();
        }
    }
}

impl<T> Future for Completion<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<T> {
        let mut s = self.slot.borrow_mut();
        match s.value.take() {
            Some(v) => Poll::Ready(v),
            None => {
                s.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

impl<T> Unpin for Completion<T> {}

pub struct Map<T, F> {
    inner: Completion<T>,
    f: Option<F>,
}

impl<T, F> Unpin for Map<T, F> {}

impl<T, U, F: FnOnce(T) -> U> Future for Map<T, F> {
    type Output = U;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<U> {
        match Pin::new(&mut self.inner).poll(cx) {
            Poll::Ready(v) => {
                let f = self.f.take().expect("Map polled after completion");
                Poll::Ready(f(v))
            }
            Poll::Pending => Poll::Pending,
        }
    }
}
