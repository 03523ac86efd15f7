//! Sensor emulator, central node, application subscriber and the shared
//! trigger scheduler.

mod app;
mod central;
mod sensor;
mod storage;
mod sync;

use std::time::{SystemTime, UNIX_EPOCH};

pub use app::{app_node_subscribe, AppEvent, AppSubscriber, DeliveredImage, NO_PROCESSED_STREAM};
pub use central::{central_node_run, CentralConfig, CentralMode, CentralNode, CentralStats};
pub use sensor::{run_sensor, sensor_node_run, SensorConfig, SensorStats};
pub use storage::{measurement_file_name, read_manifest, ManifestEntry, Storage, MANIFEST_NAME};
pub use sync::{sync_scheduler, JitterStats, SchedulerHandle, SyncScheduler, Trigger};

/// Microseconds since the Unix epoch.
pub fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}
