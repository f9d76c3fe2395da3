use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use gtring::index_tensor::{CombinedIndexSpace, GtSlice};
use gtring::transport::{
    block_on, Communicator, Endpoint, InProcFabric, LinkClass, SimFabric, SimLinkConfig,
    TcpEndpoint, TcpRendezvous, TransportError,
};

type Task<'a, T> = Pin<Box<dyn Future<Output = T> + 'a>>;

fn world<E: Endpoint>(eps: Vec<Arc<E>>) -> Vec<Communicator<E>> {
    eps.into_iter().map(Communicator::world).collect()
}

/// Run one closure per rank on its own thread over the in-process fabric.
fn on_threads<T: Send>(
    size: usize,
    f: impl Fn(Communicator<gtring::transport::InProcEndpoint>) -> T + Sync,
) -> Vec<T> {
    let comms = world(InProcFabric::new(size).endpoints());
    thread::scope(|s| {
        let handles: Vec<_> = comms.into_iter().map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn loopback_is_bitwise() {
    let comm = world(InProcFabric::new(1).endpoints()).pop().unwrap();
    let payload: Vec<u8> = (0..=255).collect();
    let recv = comm.irecv(Vec::new(), 0, 7).unwrap();
    let send = comm.isend(payload.clone(), 0, 7).unwrap();
    let got = block_on(comm.wait(recv), None).unwrap().unwrap();
    block_on(comm.wait(send), None).unwrap().unwrap();
    assert_eq!(got, payload);
}

#[test]
fn same_tag_is_fifo() {
    let out = on_threads(2, |comm| {
        if comm.rank() == 0 {
            let a = comm.isend(vec![1], 1, 3).unwrap();
            let b = comm.isend(vec![2], 1, 3).unwrap();
            block_on(comm.wait(a), None).unwrap().unwrap();
            block_on(comm.wait(b), None).unwrap().unwrap();
            Vec::new()
        } else {
            let a = comm.irecv(Vec::new(), 0, 3).unwrap();
            let b = comm.irecv(Vec::new(), 0, 3).unwrap();
            let b = block_on(comm.wait(b), None).unwrap().unwrap();
            let a = block_on(comm.wait(a), None).unwrap().unwrap();
            vec![a[0], b[0]]
        }
    });
    assert_eq!(out[1], vec![1, 2]);
}

#[test]
fn mismatched_tag_never_completes() {
    let comm = world(InProcFabric::new(1).endpoints()).pop().unwrap();
    let _send = comm.isend(vec![9], 0, 5).unwrap();
    let recv = comm.irecv(Vec::new(), 0, 6).unwrap();
    let res = block_on(comm.wait(recv), Some(Duration::from_millis(100)));
    assert!(res.is_err());
}

#[test]
fn invalid_destination_and_reserved_tag() {
    let comm = world(InProcFabric::new(2).endpoints()).pop().unwrap();
    assert!(matches!(
        comm.isend(vec![], 2, 0),
        Err(TransportError::InvalidRank { rank: 2, size: 2 })
    ));
    assert!(matches!(comm.irecv(vec![], 0, -1), Err(TransportError::ReservedTag(-1))));
}

#[test]
fn split_six_by_three() {
    let out = on_threads(6, |comm| {
        let sub = block_on(comm.split((comm.rank() / 3) as u32, comm.rank() as u32), None)
            .unwrap()
            .unwrap();
        (sub.size(), sub.rank(), sub.members().to_vec())
    });
    for (r, (size, rank, members)) in out.into_iter().enumerate() {
        assert_eq!(size, 3);
        assert_eq!(rank, r % 3);
        assert_eq!(members, ((r / 3) * 3..(r / 3) * 3 + 3).collect::<Vec<_>>());
    }
}

#[test]
fn split_uniform_color_keeps_size() {
    let out = on_threads(4, |comm| {
        let sub = block_on(comm.split(7, 0), None).unwrap().unwrap();
        (sub.size(), sub.rank())
    });
    assert_eq!(out, vec![(4, 0), (4, 1), (4, 2), (4, 3)]);
}

#[test]
fn split_twelve_by_six() {
    let out = on_threads(12, |comm| {
        let sub = block_on(comm.split((comm.rank() / 6) as u32, 0), None)
            .unwrap()
            .unwrap();
        sub.members().to_vec()
    });
    let expected: Vec<Vec<usize>> = (0..12)
        .map(|r| if r < 6 { (0..6).collect() } else { (6..12).collect() })
        .collect();
    assert_eq!(out, expected);
}

fn ones(space: CombinedIndexSpace) -> GtSlice {
    let mut s = GtSlice::full(space);
    for e in s.data_mut() {
        e.re = 1.0;
        e.im = 1.0;
    }
    s
}

#[test]
fn reduce_of_size_one_is_identity() {
    let space = CombinedIndexSpace::new(2, 1).unwrap();
    let comm = world(InProcFabric::new(1).endpoints()).pop().unwrap();
    let local = ones(space);
    let out = block_on(comm.reduce_sum(&local, 0), None).unwrap().unwrap().unwrap();
    assert_eq!(out, local);
}

#[test]
fn reduce_two_ones_gives_twos() {
    let space = CombinedIndexSpace::new(2, 1).unwrap();
    let out = on_threads(2, |comm| {
        block_on(comm.reduce_sum(&ones(space), 0), None).unwrap().unwrap()
    });
    let root = out[0].as_ref().unwrap();
    assert!(out[1].is_none());
    assert!(root.data().iter().all(|e| e.re == 2.0 && e.im == 2.0));
}

fn sim(size: usize, config: SimLinkConfig) -> (Arc<SimFabric>, Vec<Communicator<gtring::transport::SimEndpoint>>) {
    let fabric = SimFabric::new(size, config).unwrap();
    let comms = world(fabric.endpoints());
    (fabric, comms)
}

fn on_nodes(ranks_per_node: usize) -> SimLinkConfig {
    SimLinkConfig {
        ranks_per_node,
        ..SimLinkConfig::default()
    }
}

#[test]
fn sim_single_message_costs_latency_plus_transfer() {
    let m = 170_000_000usize;
    let (fabric, comms) = sim(2, on_nodes(1));
    let (a, b) = (&comms[0], &comms[1]);
    let tasks: Vec<Task<'_, f64>> = vec![
        Box::pin(async {
            let s = a.isend(vec![0; m], 1, 0).unwrap();
            a.wait(s).await.unwrap();
            a.now()
        }),
        Box::pin(async {
            let r = b.irecv(Vec::new(), 0, 0).unwrap();
            assert_eq!(b.wait(r).await.unwrap().len(), m);
            b.now()
        }),
    ];
    let times = fabric.run(tasks).unwrap();
    let expected = 5e-6 + m as f64 / 12.5e9;
    assert!((expected - 5e-6 - 0.0136).abs() < 1e-12);
    assert!((times[1] - expected).abs() < 1e-12, "{times:?}");
}

#[test]
fn sim_shared_nic_serializes() {
    let m = 1_000_000usize;
    // Ranks 0 and 1 share node 0; both send to node 1 through its egress.
    let (fabric, comms) = sim(4, on_nodes(2));
    let tasks: Vec<Task<'_, f64>> = comms
        .iter()
        .map(|c| -> Task<'_, f64> {
            Box::pin(async move {
                match c.rank() {
                    0 | 1 => {
                        let s = c.isend(vec![0; m], c.rank() + 2, 0).unwrap();
                        c.wait(s).await.unwrap();
                    }
                    r => {
                        let rv = c.irecv(Vec::new(), r - 2, 0).unwrap();
                        c.wait(rv).await.unwrap();
                    }
                }
                c.now()
            })
        })
        .collect();
    let mut times = fabric.run(tasks).unwrap()[2..].to_vec();
    times.sort_by(f64::total_cmp);
    let per = m as f64 / 12.5e9;
    assert!((times[0] - (5e-6 + per)).abs() < 1e-12, "{times:?}");
    assert!((times[1] - (5e-6 + 2.0 * per)).abs() < 1e-12, "{times:?}");
}

#[test]
fn sim_intra_ring_steps_in_parallel() {
    let m = 2_000_000usize;
    let (fabric, comms) = sim(6, on_nodes(6));
    fabric.set_logging(true);
    let tasks: Vec<Task<'_, f64>> = comms
        .iter()
        .map(|c| -> Task<'_, f64> {
            Box::pin(async move {
                let (l, r) = ((c.rank() + 5) % 6, (c.rank() + 1) % 6);
                let rv = c.irecv(Vec::new(), l, 0).unwrap();
                let s = c.isend(vec![0; m], r, 0).unwrap();
                c.wait(rv).await.unwrap();
                c.wait(s).await.unwrap();
                c.now()
            })
        })
        .collect();
    let times = fabric.run(tasks).unwrap();
    let step = 5e-6 + m as f64 / 25e9;
    for t in times {
        assert!((t - step).abs() < 1e-12);
    }
    let log = fabric.log();
    assert_eq!(log.len(), 6);
    for rec in log {
        assert_eq!(rec.class, LinkClass::Intra);
        assert_eq!(rec.start_s, 0.0);
        assert!((rec.end_s - step).abs() < 1e-15);
    }
}

#[test]
fn sim_reports_deadlock() {
    let (fabric, comms) = sim(2, on_nodes(1));
    let tasks: Vec<Task<'_, ()>> = comms
        .iter()
        .map(|c| -> Task<'_, ()> {
            Box::pin(async move {
                let rv = c.irecv(Vec::new(), 1 - c.rank(), 0).unwrap();
                let _ = c.wait(rv).await;
            })
        })
        .collect();
    let err = fabric.run(tasks).unwrap_err();
    assert_eq!(err.stalled_tasks, vec![0, 1]);
}

#[test]
fn tcp_loopback_ring() {
    let rendezvous = TcpRendezvous::bind("127.0.0.1:0").unwrap();
    let root = rendezvous.local_addr().unwrap();
    let size = 3;
    let out: Vec<Vec<u8>> = thread::scope(|s| {
        let mut handles = vec![s.spawn(move || TcpEndpoint::root(rendezvous, size).unwrap())];
        for r in 1..size {
            handles.push(s.spawn(move || TcpEndpoint::join(root, r, size).unwrap()));
        }
        let eps: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let runs: Vec<_> = world(eps)
            .into_iter()
            .map(|c| {
                s.spawn(move || {
                    let me = c.rank();
                    let rv = c.irecv(Vec::new(), (me + size - 1) % size, 1).unwrap();
                    let sd = c.isend(vec![me as u8; 1000], (me + 1) % size, 1).unwrap();
                    let got = block_on(c.wait(rv), Some(Duration::from_secs(10))).unwrap().unwrap();
                    block_on(c.wait(sd), Some(Duration::from_secs(10))).unwrap().unwrap();
                    let sub = block_on(c.split(0, (size - me) as u32), Some(Duration::from_secs(10)))
                        .unwrap()
                        .unwrap();
                    assert_eq!(sub.rank(), size - 1 - me);
                    got
                })
            })
            .collect();
        runs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (r, got) in out.iter().enumerate() {
        assert_eq!(got, &vec![((r + size - 1) % size) as u8; 1000]);
    }
}
