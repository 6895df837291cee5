use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use tilepress::clock::{Clock, Timestamp, VirtualClock, WallClock};
use tilepress::conversion::{ConversionService, DicomSink, HttpDicomSink, ServiceConfig};
use tilepress::dicom_store::{self, DicomStore};
use tilepress::http::{call, HttpServer, Request};
use tilepress::object_store::{BucketConfig, ObjectStore};
use tilepress::pubsub::{
    Broker, DeliveryLoop, DeliveryOutcome, HttpEndpoint, SubscriptionConfig, TopicSink,
    DEFAULT_DEAD_LETTER_TOPIC,
};
use tilepress::wsi::generate_base_only;

const TOPIC: &str = "wsi-ingest";
const SUB: &str = "wsi-dicom-push";

fn subscription(endpoint: &str) -> SubscriptionConfig {
    SubscriptionConfig {
        ack_deadline: Duration::from_secs(660),
        ..SubscriptionConfig::new(SUB, TOPIC, endpoint)
    }
}

#[test]
fn http_push_through_remote_store() {
    let dir = tempfile::tempdir().unwrap();
    let clock: Arc<dyn Clock> = Arc::new(WallClock);

    let dicom = Arc::new(DicomStore::open(dir.path().join("dicom"), clock.clone()).unwrap());
    let store_server = HttpServer::start(
        "127.0.0.1:0",
        2,
        Arc::new(dicom_store::http_handler(dicom.clone())),
    )
    .unwrap();

    let objects = Arc::new(ObjectStore::open(dir.path().join("objects"), clock.clone()).unwrap());
    objects
        .create_bucket("landing", BucketConfig::default())
        .unwrap();
    let sink: Arc<dyn DicomSink> = Arc::new(HttpDicomSink::new(&store_server.url("")));
    let service = Arc::new(ConversionService::new(
        objects.clone(),
        sink,
        clock.clone(),
        ServiceConfig::default(),
    ));
    let routed = service.clone();
    let server = HttpServer::start(
        "127.0.0.1:0",
        1,
        Arc::new(move |r: &Request| routed.route(r)),
    )
    .unwrap();

    let broker = Arc::new(Broker::new(clock.clone()));
    broker.create_topic(TOPIC).unwrap();
    broker.create_topic(DEFAULT_DEAD_LETTER_TOPIC).unwrap();
    broker
        .create_subscription(subscription(&server.url("/push")))
        .unwrap();
    objects.set_notification_sink(Arc::new(TopicSink::new(broker.clone(), TOPIC)));
    let delivery = DeliveryLoop::spawn(
        broker.clone(),
        SUB,
        Arc::new(HttpEndpoint::new(server.url("/push"))),
    );

    for i in 0..3 {
        let bytes = generate_base_only(&format!("s{i}"), 300, 300, 256, i).unwrap();
        objects
            .put_object("landing", &format!("s{i}.spyr"), &bytes)
            .unwrap();
    }
    let started = Instant::now();
    while broker.stats(SUB).unwrap().acked < 3 {
        assert!(
            started.elapsed() < Duration::from_secs(60),
            "{:?}",
            broker.stats(SUB).unwrap()
        );
        thread::sleep(Duration::from_millis(20));
    }
    delivery.stop();

    let stats = broker.stats(SUB).unwrap();
    assert_eq!((stats.published, stats.dead_lettered), (3, 0));
    let studies = dicom.list_studies().unwrap();
    assert_eq!(studies.len(), 3);
    for s in &studies {
        // 300 px on a 256 tile needs one halving.
        assert_eq!(dicom.query_series(s).unwrap().len(), 2);
    }

    assert_eq!(
        call("GET", &server.url("/healthz"), b"", Duration::from_secs(5))
            .unwrap()
            .status,
        200
    );
    service.drain();
    assert_eq!(
        call("GET", &server.url("/healthz"), b"", Duration::from_secs(5))
            .unwrap()
            .status,
        503
    );
    let late = call("POST", &server.url("/push"), b"{}", Duration::from_secs(5)).unwrap();
    assert_eq!(late.status, 503);
    server.stop();
    store_server.stop();
}

#[test]
fn redelivery_after_nack_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let vclock = Arc::new(VirtualClock::new(Timestamp(1_700_000_000_000)));
    let clock: Arc<dyn Clock> = vclock.clone();
    let objects = Arc::new(ObjectStore::open(dir.path().join("objects"), clock.clone()).unwrap());
    objects
        .create_bucket("landing", BucketConfig::default())
        .unwrap();
    let dicom = Arc::new(DicomStore::open(dir.path().join("dicom"), clock.clone()).unwrap());
    let service = ConversionService::new(
        objects.clone(),
        dicom.clone(),
        clock.clone(),
        ServiceConfig::default(),
    );

    let broker = Arc::new(Broker::new(clock.clone()));
    broker.create_topic(TOPIC).unwrap();
    broker.create_topic(DEFAULT_DEAD_LETTER_TOPIC).unwrap();
    broker.create_subscription(subscription("local")).unwrap();
    objects.set_notification_sink(Arc::new(TopicSink::new(broker.clone(), TOPIC)));
    let bytes = generate_base_only("x", 700, 500, 256, 7).unwrap();
    objects
        .put_object("landing", "slide-x.spyr", &bytes)
        .unwrap();

    let first = broker.lease_due(SUB).unwrap().pop().unwrap();
    let reply = service.handle_push(&first.envelope().to_json());
    assert_eq!(reply.status, 200);
    let before = dicom.fingerprint().unwrap();
    broker.nack(SUB, first.message.id).unwrap();

    vclock.advance(Duration::from_secs(5));
    let second = broker.lease_due(SUB).unwrap().pop().unwrap();
    assert_eq!(second.attempt, 2);
    let reply = service.handle_push(&second.envelope().to_json());
    assert_eq!(reply.status, 200);
    let body: serde_json::Value = serde_json::from_slice(&reply.body).unwrap();
    assert_eq!(body["added"], 0);
    broker
        .report(
            SUB,
            second.message.id,
            second.attempt,
            DeliveryOutcome::Acked,
        )
        .unwrap();

    assert_eq!(dicom.fingerprint().unwrap(), before);
    assert_eq!(dicom.list_studies().unwrap().len(), 1);
    let stats = broker.stats(SUB).unwrap();
    assert_eq!((stats.acked, stats.deliveries, stats.pending), (1, 2, 0));
}
