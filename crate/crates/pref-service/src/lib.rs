//! HTTP backend for collecting pairwise preference judgments.
//!
//! | method | path | result |
//! |---|---|---|
//! | POST | `/tasks` | `{task_id}`; 400 on an empty field |
//! | GET | `/tasks/next?annotator=ID` | oldest unleased open task, leased for 10 minutes; 204 when none |
//! | GET | `/tasks/{id}` | task with its judgment, if any |
//! | POST | `/tasks/{id}/judgment` | the stored preference record; 409 once judged, 404 if unknown |
//! | POST | `/preferences` | stores an externally labelled record (AI feedback) |
//! | GET | `/export?source=&annotator=&since=&until=` | JSON Lines of matching records in submission order |
//! | GET | `/stats` | `{open, done, leased, records, by_annotator}` |
//!
//! Helpfulness maps to the label `d` as `a_better → -1`, `b_better → +1`,
//! `both_good → 0`, `both_bad → 0` with `quality_flag: "low"`.

mod api;
pub mod clock;
mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

pub use api::{router, AppState, Created, JudgmentRequest, NewTask, Stored};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{Result, ServiceError};
pub use store::{AnnotationTask, ExportFilter, Helpfulness, Judgment, Stats, Status, Store};

/// Opens (or creates) the event log and builds the shared state.
pub fn state(store_path: &Path, clock: Arc<dyn Clock>) -> Result<Arc<AppState>> {
    let store = Store::open(store_path)?;
    Ok(Arc::new(AppState {
        store: RwLock::new(store),
        clock,
    }))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves with the system clock until Ctrl-C.
pub async fn run(addr: SocketAddr, store_path: &Path) -> anyhow::Result<()> {
    let st = state(store_path, Arc::new(SystemClock))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "listening on {} with log {}",
        listener.local_addr()?,
        store_path.display()
    );
    serve(listener, st, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
