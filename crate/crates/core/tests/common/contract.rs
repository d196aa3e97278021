//! Lifecycle behaviour every engine implementation must share.

use std::path::Path;
use std::sync::Arc;

use repro::engine::{BindMount, ContainerSpec, Engine, EngineClient, EngineError, DEFAULT_TIMEOUT_S};
use repro::exchange::{INPUT_NAME, OUTPUT_NAME};

/// What to run against one engine. `copy` must copy the exchange input file
/// to the output file; `fail` must print `boom` to stderr and exit 3; `sleep`
/// must run for much longer than a second.
pub struct Subject {
    pub engine: Arc<dyn Engine>,
    pub copy: (String, Vec<String>),
    pub fail: (String, Vec<String>),
    pub sleep: (String, Vec<String>),
    /// A reference that no registry serves.
    pub absent: String,
}

fn spec(image: &str, argv: &[String], host: &Path, timeout_s: u64) -> ContainerSpec {
    ContainerSpec {
        image: image.to_string(),
        argv: argv.to_vec(),
        bind: BindMount::exchange(host),
        memory_limit_bytes: 256 * 1024 * 1024,
        gpu: false,
        timeout_s,
    }
}

/// Runs the suite and returns the names of the checks performed.
pub async fn run_contract(subject: &Subject, workdir: &Path) -> Vec<&'static str> {
    let mut done = Vec::new();
    let engine = &subject.engine;
    let client = EngineClient::new(engine.clone());

    engine.ping().await.expect("ping");
    let info = client.engine_info().await;
    assert!(info.reachable);
    assert!(!info.api_version.is_empty());
    done.push("ping-and-info");

    assert!(!engine.inspect_image(&subject.absent).await.unwrap());
    match client.pull_image(&subject.absent).await {
        Err(EngineError::ImageNotFound { .. }) => {}
        other => panic!("pulling an absent image gave {other:?}"),
    }
    done.push("absent-image");

    let copy_image = &subject.copy.0;
    client.ensure_image(copy_image).await.expect("ensure copy image");
    assert!(engine.inspect_image(copy_image).await.unwrap());
    assert!(
        client.ensure_image(copy_image).await.unwrap().is_none(),
        "second ensure must not pull"
    );
    for (image, _) in [&subject.fail, &subject.sleep] {
        client.ensure_image(image).await.expect("ensure image");
    }
    done.push("present-and-pull");

    // Raw lifecycle with a read-write bind mount.
    let dir = workdir.join("copy");
    std::fs::create_dir_all(&dir).unwrap();
    let input = "{\"a\":1}\n{\"b\":\"é\"}\n";
    std::fs::write(dir.join(INPUT_NAME), input).unwrap();
    let id = engine
        .create_container(&spec(copy_image, &subject.copy.1, &dir, DEFAULT_TIMEOUT_S))
        .await
        .expect("create");
    engine.start_container(&id).await.expect("start");
    assert_eq!(engine.wait_container(&id).await.expect("wait"), 0);
    engine.container_logs(&id).await.expect("logs");
    engine.remove_container(&id).await.expect("remove");
    engine.remove_container(&id).await.expect("second remove is a no-op");
    assert!(matches!(
        engine.start_container(&id).await,
        Err(EngineError::NoSuchContainer(_))
    ));
    assert_eq!(std::fs::read_to_string(dir.join(OUTPUT_NAME)).unwrap(), input);
    done.push("lifecycle-and-bind-mount");

    let dir = workdir.join("fail");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(INPUT_NAME), input).unwrap();
    let outcome = client
        .run_container(&spec(&subject.fail.0, &subject.fail.1, &dir, DEFAULT_TIMEOUT_S))
        .await
        .expect("run");
    assert_eq!(outcome.exit_code, 3);
    assert!(!outcome.timed_out);
    assert!(String::from_utf8_lossy(&outcome.stderr).contains("boom"));
    done.push("nonzero-exit");

    let dir = workdir.join("sleep");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(INPUT_NAME), input).unwrap();
    let outcome = client
        .run_container(&spec(&subject.sleep.0, &subject.sleep.1, &dir, 1))
        .await
        .expect("run");
    assert!(outcome.timed_out);
    assert_eq!(outcome.exit_code, repro::engine::TIMEOUT_EXIT_CODE);
    done.push("timeout");

    done
}
